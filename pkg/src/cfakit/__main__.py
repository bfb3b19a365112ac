import sys

from cfakit.cli import main

sys.exit(main())
