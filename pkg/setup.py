from setuptools import setup, find_packages

setup(
    name='gs-pcanet',
    version='0.1.0',
    description='GS-PCANet: graph-regularized sparse PCA filter networks for tissue tile classification',
    include_package_data=True,
    python_requires='>=3.9',
    packages=find_packages(exclude=['tests']),
    install_requires=[
        'numpy>=1.20',
        'torch',
        'scipy',
        'scikit-learn',
        'pandas>=1.5',
        'tqdm',
        'opt_einsum',
    ],
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['gspcanet=gspcanet.cli:main']},
    license='MIT'
)
