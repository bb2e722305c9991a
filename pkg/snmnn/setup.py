#!/usr/bin/env python
# -*- coding: utf-8 -*-

import itertools
import os
from typing import Any, Dict

from setuptools import find_packages, setup


def version() -> str:
    version_py = os.path.join(os.path.dirname(__file__), "snmnn", "__init__.py")
    with open(version_py) as in_handle:
        version_line = next(itertools.dropwhile(lambda x: not x.startswith("__version__"),
                                                in_handle))
    version = version_line.split('=')[-1].strip().replace('"', '')
    return version


package_info = dict(
    name='snmnn',
    version=version(),
    description='Spectrally normalized memory neuron networks for GPS-denied UAV position estimation',
    long_description=open(os.path.join(os.path.dirname(__file__), 'README.md')).read(),
    long_description_content_type='text/markdown',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering',
    ],
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.20',
        'scipy>=1.6',
        'pandas>=1.5',
    ],
    packages=find_packages(exclude=['tests']),
    entry_points={
        'console_scripts': [
            'snmnn=snmnn.cli:main',
        ],
    },
)  # type: Dict[str, Any]

setup(**package_info)
