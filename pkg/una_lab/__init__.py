from .policy import Vocab, Prompt, Response, TabularPolicy, ParametricPolicy, build_policy
from .records import FeedbackRecord, Label
from .reward import Beta, ExplicitRewardModel, ScoreBounds
from .config import TrainConfig, LossKind, load_config
from .trainer import train_offline, train_online_una, train_policy_gradient_baseline, train_reward_model
