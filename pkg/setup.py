from setuptools import find_packages, setup

setup(
    name="florg-sim",
    version="0.1.0",
    description="Federated LoRA simulator with Gram-matrix aggregation",
    packages=find_packages(include=["florg_sim", "florg_sim.*"]),
    python_requires=">=3.9",
    install_requires=[
        "click>=8.1",
        "numpy>=1.26",
        "pydantic>=2.7",
        "PyYAML>=6.0",
    ],
    extras_require={"test": ["pytest>=8.0"]},
    entry_points={"console_scripts": ["florg-sim=florg_sim.cli:main"]},
)
