import sys

from regiondiff.cli import main

sys.exit(main())
