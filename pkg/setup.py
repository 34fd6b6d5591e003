from setuptools import setup, find_packages

# Import __version__
exec(open("fairdi/version.py").read())

setup(
    name="fairdi",
    version=__version__,
    description="Fair distillation training and fairness evaluation for binary classifiers",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    license="MIT",
    packages=find_packages(include=["fairdi", "fairdi.*"]),
    python_requires=">=3.9",
    install_requires=["numpy", "scipy", "pandas", "scikit-learn", "Pillow"],
    extras_require={
        "dev": [
            "mypy",
            "black",
            "coverage",
            "pylint",
            "pytest",
            "twine",
            "wheel",
        ],
    },
    entry_points={"console_scripts": ["fairdi=fairdi.cli:main"]},
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Developers",
        "Intended Audience :: Science/Research",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Programming Language :: Python :: 3 :: Only",
    ],
)
