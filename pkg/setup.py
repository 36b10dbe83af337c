from setuptools import setup

version = '1.0.0'


setup(name='pyworkload',
      version=version,
      description='Black-box workload profiling and emulation for Python',
      author='pyworkload developers',
      packages=['pyworkload', 'pyworkload/testing'],
      license='MIT License',
      test_suite='test',
      python_requires='>=3.4',
      install_requires=[
          'six',
          'psutil',
          'numpy',
          'python-dateutil>=2.0',
          'PyYAML',
      ],
      extras_require={
          'plot': ['matplotlib'],
          'mongo': ['pymongo'],
      },
      entry_points={
          'console_scripts': ['pyworkload=pyworkload.cli:main'],
      },
      platforms=['linux'],
      classifiers=['Development Status :: 4 - Beta',
                   'Intended Audience :: Developers',
                   'Intended Audience :: Science/Research',
                   'License :: OSI Approved :: MIT License',
                   'Operating System :: POSIX :: Linux',
                   'Programming Language :: Python',
                   'Programming Language :: Python :: 3',
                   'Topic :: System :: Benchmark',
                   'Topic :: Software Development :: Testing']
    )
