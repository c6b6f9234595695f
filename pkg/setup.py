#!/usr/bin/python
"""fedpmt setup script."""

from setuptools import setup, find_packages

# Package Version
from fedpmt import __version__ as version

setup(
    name='fedpmt',
    version=version,

    description=("Federated partial model training simulator"),
    long_description=open('README.md').read(),
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Environment :: Console',
        'Intended Audience :: Science/Research',
        'Intended Audience :: Developers',
        'Programming Language :: Python',
        'License :: OSI Approved :: BSD License',
        'Topic :: Software Development',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'Operating System :: POSIX',
        'Operating System :: Unix',
        'Operating System :: MacOS'
    ],
    license='FreeBSD',

    packages=find_packages(exclude=['tests']),
    install_requires=['pandas (>=0.22.0)',
                      'setuptools (>=39.0.1)',
                      'numpy (>=1.14.2)',
                      'matplotlib (>=2.1.1)',
                      'PyYAML (>=3.12)',
                      'tqdm (>=4.19.5)',
                      'joblib (>=0.11)',
                      'scikit_learn (>=0.19.1)'
                      ],
    extras_require={'tests': ['pytest (>=3.5)', 'hypothesis (>=3.50)']},
    entry_points={'console_scripts': ['fedpmt=fedpmt.cli:main']},
)
