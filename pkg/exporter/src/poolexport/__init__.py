from .export import (ExportError, ExportJob, ImageEntry, classifier_rows,
                     expand_template, export, read_image_list)
from .tensorfile import read_tensor, write_tensor

__version__ = "0.1.0"
