import sys

from gilt.cli import main

sys.exit(main())
