from setuptools import setup

setup(
    name="regiondiff",
    version="0.1",
    description=(
        "Segment images without labels by training a diffusion model with "
        "region masks."),
    license="GPLv3",
    install_requires=[
        "Sphinx", "linotype", "torch", "numpy", "scipy", "Pillow", "tqdm"],
    python_requires=">=3.8",
    tests_require=["pytest"],
    packages=["regiondiff", "regiondiff.commands"],
    entry_points={
        "console_scripts": ["regiondiff=regiondiff.cli:main"]})
