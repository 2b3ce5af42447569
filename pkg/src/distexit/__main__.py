import sys

from distexit.cli import main

sys.exit(main())
