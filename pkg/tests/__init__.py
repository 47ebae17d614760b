from pathlib import Path

ROOT_DIRECTORY = Path(__file__).parent.parent.absolute()
