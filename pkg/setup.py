from setuptools import setup

setup(
    name="delayfbsde",
    version="0.1",
    description="Monte Carlo laboratory for forward-backward stochastic delay equations.",
    packages=["delayfbsde"],
    scripts=["bin/delayfbsde"],
    install_requires=["numpy", "scipy"],
)
