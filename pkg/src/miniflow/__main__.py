import sys

from miniflow.cli import main

sys.exit(main())
