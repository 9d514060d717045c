from setuptools import setup, find_packages

setup(
    name="aqsnet",
    version="0.1.0",
    packages=find_packages(exclude=["examples", "examples.*"]),
    py_modules=["cli", "app"],
    install_requires=[
        "numpy>=1.24.0",
        "scipy>=1.10.0",
        "pandas>=1.5.0",
        "tqdm>=4.65.0",
        "streamlit>=1.22.0",
    ],
    extras_require={
        "test": ["pytest>=7.0.0", "pytest-mock>=3.10.0"],
    },
    entry_points={
        "console_scripts": ["aqsnet=adapters.cli_adapter:main"],
    },
    author="garyhukkeri",
    author_email="",
    description="Segmentation quality assessment network with a synthetic data harness, CLI and Streamlit QA browser",
    keywords="segmentation, quality assessment, remote sensing, buildings, streamlit",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
)
