import sys

from delaysched.harness.cli import main

sys.exit(main())
