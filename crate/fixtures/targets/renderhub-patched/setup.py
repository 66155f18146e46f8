from setuptools import setup

setup(name="renderhub", version="2.0", packages=["webui", "loaders", "tools", "serving", "training"])
