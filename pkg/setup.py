from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="supply-chain-cyber-risk",
    version="0.1.0",
    description="Supply-chain network features and boosted-tree models for cyber breach risk",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=["cli", "errors", "evalsuite", "explain", "features", "gbm", "graph_core", "synth", "utils",
                "visualizer"],
    package_dir={"": "src"},
    python_requires=">=3.9",
    install_requires=[r for r in requirements if not r.startswith("pytest")],
    extras_require={"test": [r for r in requirements if r.startswith("pytest")]},
    entry_points={"console_scripts": ["scrisk=cli:main"]},
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
    ],
)
