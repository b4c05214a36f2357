# __init__.py
from .data_classes import *
from .data_enums import *
