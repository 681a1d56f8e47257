"""
Configuration Package
Settings dictionaries; import RunConfig from config.run_config
"""

from .config import *
