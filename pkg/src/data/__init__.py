"""Data files shipped with the package."""
from pathlib import Path

DATA_DIR = Path(__file__).parent
LEXICON_PATH = DATA_DIR / "lexicon.toml"
DESCRIPTIONS_PATH = DATA_DIR / "descriptions.toml"
