#!/usr/bin/env python
"""Django's command-line utility for running OMDLab experiments."""
import os
import sys

# Hyphenated spellings accepted on the command line.
COMMAND_ALIASES = {
    'list-experiments': 'list_experiments',
}


def main():
    """Run administrative tasks."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'OMDLab.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    argv = list(sys.argv)
    if len(argv) > 1:
        argv[1] = COMMAND_ALIASES.get(argv[1], argv[1])
    execute_from_command_line(argv)


if __name__ == '__main__':
    main()
