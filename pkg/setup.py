from setuptools import setup, find_packages

def load_requirements():
    with open('requirements.txt') as f:
        return f.read().splitlines()

setup(
    name='calidet',
    version='0.1.1',
    description='Context-prior calibration for object detectors: edge matrices, biased-attention calibration and self-calibration, powered by Numpy.',
    long_description=open('README.md').read(),
    long_description_content_type='text/markdown',
    packages=find_packages(exclude=['tests']),
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
    ],
    python_requires='>=3.10',
    install_requires=load_requirements(),
    entry_points={
        'console_scripts': ['calidet=calidet.cli:main'],
    },
)
