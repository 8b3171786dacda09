import sys

from cgvqa.cli import main

sys.exit(main())
