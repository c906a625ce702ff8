from __future__ import annotations

import os
import sys
from subprocess import run
from typing import Dict, List, NamedTuple
from distutils.errors import DistutilsError
from distutils import log
from setuptools import Command, setup, find_packages


HERE = os.path.dirname(os.path.abspath(__file__))

UNITTEST = ['-m', 'unittest', 'discover', '-s', 'blast_mil', '-t', '.']


class Tool(NamedTuple):
    name: str
    argv: List[str]

    def run(self, env: Dict[str, str]) -> int:
        return run([sys.executable] + self.argv, cwd=HERE, env=env).returncode


# black and pylint get explicit paths: black's ignore rules match on the
# absolute path (https://github.com/python/black/issues/712)
LINTERS = [
    Tool('black', ['-m', 'black', '--check', '--diff', 'setup.py', 'blast_mil']),
    Tool('mypy', ['-m', 'mypy', '--strict', '--ignore-missing-imports', 'blast_mil']),
    Tool('pylint', ['-m', 'pylint', 'setup.py', 'blast_mil']),
]

COVERAGE = [
    Tool('coverage', ['-m', 'coverage', 'run', '--source', 'blast_mil'] + UNITTEST),
    Tool('report', ['-m', 'coverage', 'report']),
    Tool('html', ['-m', 'coverage', 'html']),
]


class _ToolCommand(Command):  # type: ignore
    user_options: List[str] = []
    tools: List[Tool] = []

    def initialize_options(self) -> None:
        pass

    def finalize_options(self) -> None:
        pass

    def run(self) -> None:
        # slow acceptance runs stay opt-in
        env = {k: v for k, v in os.environ.items() if k != 'BLAST_MIL_SLOW_TESTS'}
        failed = []
        for tool in self.tools:
            self.announce(f'\n{tool.name}: {" ".join(tool.argv)}', level=log.INFO)
            code = tool.run(env)
            if code:
                failed.append(f'{tool.name} ({code})')
        if failed:
            raise DistutilsError(f'failed: {", ".join(failed)}')
        self.announce('all passed', level=log.INFO)


class CheckCommand(_ToolCommand):
    description = 'run the test suite under coverage, then black, mypy and pylint'
    tools = COVERAGE[:2] + LINTERS


class CoverageCommand(_ToolCommand):
    description = 'run the test suite under coverage and write htmlcov/'
    tools = COVERAGE


#
# Package declaration
#

with open('README.md') as f:
    LONG_DESCRIPTION = f.read()

setup(
    # fmt: off
    name='blast_mil',
    version='0.1.0',

    description=(
        'Patient-level leukemia screening from blood smears '
        'as multiple-instance learning'
    ),
    long_description=LONG_DESCRIPTION,

    license='MIT',

    # See https://pypi.python.org/pypi?%3Aaction=list_classifiers
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Image Recognition',
        'Topic :: Scientific/Engineering :: Medical Science Apps.',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3 :: Only',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
    ],
    keywords='leukemia blood-smear multiple-instance-learning lstm detection',

    packages=find_packages(exclude=['tests*']),
    python_requires='>=3.8',

    install_requires=[
        'numpy>=1.21',
        'scipy>=1.7',
        'scikit-learn>=1.0',
        'scikit-image>=0.19',
        'Pillow>=9.1',
        'torch>=1.13',
        'torchvision>=0.14',
        'matplotlib>=3.5',
    ],

    extras_require={
        'dev': [
            'black>=22.3',
            'mypy>=0.981',
            'pylint>=2.13,<3',
        ],
        'test': [
            'coverage>=6.0',
        ],
    },

    test_suite='blast_mil',

    entry_points={
        'console_scripts': [
            'blast-mil = blast_mil.__main__:main',
        ],
    },

    cmdclass={
        'check': CheckCommand,
        'coverage': CoverageCommand,
    }
)
