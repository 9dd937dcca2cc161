from setuptools import setup, find_packages
from os import path

here = path.abspath(path.dirname(__file__))

# Get the long description from the README file
with open(path.join(here, "README.md"), encoding="utf-8") as f:
    long_description = f.read()

setup(
    name="mlgamp",
    version="0.1.0.dev0",
    description="Multi-layer GAMP estimator with state evolution and Monte-Carlo harness",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Mathematics",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
    ],
    keywords="message-passing gamp state-evolution quantization mimo",
    package_dir={"": "src"},
    packages=find_packages(where="src"),  # Required
    python_requires=">=3.8, <4",
    install_requires=["numpy", "scipy", "typing_extensions"],
    extras_require={
        "dev": ["black", "mypy"],
        "test": ["pytest", "pytest-coverage", "pytest-asyncio", "pytest-mock", "mock"],
    },
    package_data={"mlgamp": ["py.typed"]},
    data_files=[],
    entry_points={"console_scripts": ["mlgamp=mlgamp_harness.main:main"]},
    project_urls={},
)
