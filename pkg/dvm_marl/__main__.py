"""Allow ``python -m dvm_marl``."""

from dvm_marl.main import main

if __name__ == "__main__":
    raise SystemExit(main())
