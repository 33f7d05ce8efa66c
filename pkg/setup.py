from setuptools import setup, find_packages
setup(
    name="una_lab",
    version="0.1.0",
    packages=find_packages(exclude=("tests",)),
    python_requires=">=3.8",
    install_requires=[
        "torch>=2.0.0",
        "numpy>=1.22",
        "omegaconf",
        "tqdm",
    ],
    extras_require={"test": ["pytest", "hypothesis"]},
    entry_points={"console_scripts": ["una-lab=una_lab.cli:main"]},
)
