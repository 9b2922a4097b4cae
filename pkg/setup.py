from setuptools import setup, find_packages

setup(
    name = "artigrasp",
    version = "1.0",
    description = "Shape and grasp reconstruction for articulated objects",
    packages = find_packages(),
    python_requires = ">=3.8",
    install_requires = [
        "numpy>=1.20",
        "scipy>=1.6",
        "scikit-image>=0.19",
        "imageio>=2.16",
    ],
    classifiers = [
        "Development Status :: 3 - Alpha",
        "Topic :: Scientific/Engineering :: Artificial Intelligence"
    ],
    test_suite = "artigrasp.tests",
    entry_points = {
        'console_scripts': ['artigrasp=artigrasp.cli:main'],
    }
)
