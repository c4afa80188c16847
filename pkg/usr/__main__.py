"""
``python -m usr`` runs the same command line as the ``usr`` script
"""
import sys

from usr.cli.main import main

if __name__ == '__main__':
    sys.exit(main())
