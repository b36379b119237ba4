from setuptools import setup, find_packages

setup(
    name="opaseg",
    version="1.0.0",
    packages=find_packages(exclude=["tests"]),
    py_modules=['cli', 'config'],
    install_requires=[
        "numpy>=1.24",
        "scipy>=1.10",
        "python-dotenv==1.0.0",
        "pydantic>=2.5.3",
        "rich",
        "Pillow>=10.0"
    ],
    extras_require={
        "test": ["pytest>=7.4"],
    },
    entry_points={
        'console_scripts': [
            'opaseg=cli:main',
        ],
    },
)
