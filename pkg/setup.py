from setuptools import setup, find_packages
import unittest
import codecs

def test_suite():
  test_loader = unittest.TestLoader()
  test_suite = test_loader.discover("tests", pattern="test_*.py")

  return test_suite


exec(open('trace_decline/version_info.py').read())

setup(
  name="trace_decline",
  version=__version__,
  description="Granularity-aware traceability links between proposal discussions and Go source code",
  long_description=codecs.open("README.md", encoding="utf-8").read(),
  long_description_content_type="text/markdown",
  license="BSD 3-Clause",
  test_suite="setup.test_suite",
  classifiers=[
  "Intended Audience :: Developers",
  "Topic :: Software Development",
  "Topic :: Scientific/Engineering :: Artificial Intelligence",
  "License :: OSI Approved :: BSD License",
  "Programming Language :: Python :: 3",
  ],
  packages=find_packages(exclude=["tests"]),
  package_data={
    "trace_decline": ["prompts/*.txt", "data/*.txt"],
  },
  entry_points={
    "console_scripts": [
      "trace-decline=trace_decline.trace_decline_main:main",
    ],
  },
  install_requires=[
    "nltk>=3.2",
    "numpy",
    "scipy>=1.9",
    "scikit-learn",
    "requests",
    "absl-py",
  ],
  include_package_data=True,
)
