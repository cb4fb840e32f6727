"""``python3 -m dwinformer``."""

import sys

from dwinformer.cli import main

sys.exit(main())
