from setuptools import setup

dependencies = [
    'numpy>=1.20',
    'scipy>=1.6',
    'pandas>=1.5',
]

test_deps = [
    'pytest',
    'pytest-cov',
    'mock',
]

console_scripts = [
    'ruepi = ruepi.cli:main',
]

setup(
    name='ruepi',
    version='1.0.0',
    package_dir={'ruepi': 'src/ruepi'},
    packages=['ruepi'],
    package_data={'ruepi': ['config/*.json']},
    scripts=[],
    license='Apache 2.0',
    description='Prediction intervals for multivariate forecasts conditioned on reconstruction errors.',
    install_requires=dependencies,
    extras_require={
        'test': test_deps
    },
    python_requires='>=3.8',
    entry_points={
        'console_scripts': console_scripts
    },
    classifiers=[
        'Intended Audience :: Science/Research',
        'Operating System :: OS Independent',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ]
)
