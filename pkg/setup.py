from setuptools import setup, find_packages

# configuration is all pulled from setup.cfg
setup()
