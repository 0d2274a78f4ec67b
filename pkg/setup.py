from setuptools import setup

setup(
    name='python-arfm',
    version='0.1.0',
    packages=['arfm'],
    url='https://github.com/python-arfm/python-arfm',
    download_url='https://github.com/python-arfm/python-arfm',
    license='BSD 3-Clause License',
    author='',
    author_email='',
    description='Autoregressive flow matching for probabilistic future point-track prediction on a synthetic world',
    keywords='python flow-matching point-tracks motion-prediction',
    install_requires=["torch", "numpy", "scipy", "pandas", "tomli", "tomli-w", "tqdm"],
    entry_points={'console_scripts': ['arfm=arfm.cli:main']},
    long_description_content_type="text/markdown",
    long_description=open('README.md').read()
)
