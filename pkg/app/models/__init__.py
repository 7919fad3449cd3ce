from . import query
from .models import *
