# SPDX-License-Identifier: MIT

import os
import os.path
import pickle
import subprocess

import nox


nox.options.sessions = ['test']
nox.options.reuse_existing_virtualenvs = True


RUNTIME_DEPENDENCIES = {
    'numpy',
    'pandas',
    'toml',
}

TEST_DEPENDENCIES = {
    'hypothesis',
    'pytest',
}


def install_dependencies(session, dependencies):
    unmet = pickle.loads(
        subprocess.check_output([
            'python',
            os.path.join('tests', 'unmet-dependencies.py'),
            *dependencies,
        ], env=session.env, text=False)
    )

    if unmet:
        session.install(*unmet)
    else:
        print('no dependencies to install')


@nox.session()
def test(session):
    htmlcov_output = os.path.join(session.virtualenv.location, 'htmlcov')
    xmlcov_output = os.path.join(session.virtualenv.location, 'coverage.xml')

    install_dependencies(session, {
        *RUNTIME_DEPENDENCIES,
        *TEST_DEPENDENCIES,
        # coverage
        'pytest-cov',
    })

    session.run(
        'python', '-m', 'pytest',
        '--showlocals', '-ra', '--durations=10', '--durations-min=1.0',
        '--cov=livemap', '--cov-report=term',
        f'--cov-report=html:{htmlcov_output}',
        f'--cov-report=xml:{xmlcov_output}',
        'tests/', *session.posargs,
    )
    print(f'coverage report available at: file://{os.path.join(htmlcov_output, "index.html")}')


@nox.session()
def acceptance(session):
    install_dependencies(session, RUNTIME_DEPENDENCIES | TEST_DEPENDENCIES)

    session.run(
        'python', '-m', 'pytest',
        '-ra', '--durations=0',
        '-m', 'slow',
        'tests/', *session.posargs,
    )


@nox.session()
def docs(session):
    session.install('-r', os.path.join('docs', 'requirements.txt'))
    install_dependencies(session, RUNTIME_DEPENDENCIES)

    session.run('sphinx-build', '-b', 'html', 'docs', os.path.join('docs', '_build', 'html'))
