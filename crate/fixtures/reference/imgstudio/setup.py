from setuptools import setup

setup(name="imgstudio", version="1.0", packages=["webui", "adapters", "loaders", "serving", "utils"])
