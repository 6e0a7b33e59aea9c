"""``python -m gaitdis``: same as the ``gaitdis`` console script."""
from gaitdis.cli import main

main()
