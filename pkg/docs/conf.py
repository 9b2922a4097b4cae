# -*- coding: utf-8 -*-
#
# artigrasp documentation build configuration file.

import sys
import os

sys.path.insert(0, os.path.abspath('..'))

# -- General configuration ------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.doctest',
    'sphinx.ext.mathjax',
    'sphinx.ext.napoleon',
]

templates_path = ['_templates']
source_suffix = '.rst'
autodoc_member_order = 'bysource'
master_doc = 'index'

project = 'artigrasp'
copyright = '2026, the artigrasp developers'
author = 'the artigrasp developers'

version = '1.0'
release = '1.0'

exclude_patterns = ['_build']
pygments_style = 'sphinx'
todo_include_todos = False

# -- Options for HTML output ----------------------------------------------

htmlhelp_basename = 'artigraspdoc'

# -- Options for LaTeX output ---------------------------------------------

latex_documents = [
  (master_doc, 'artigrasp.tex', 'artigrasp Documentation',
   author, 'manual'),
]

# -- Options for manual page output ---------------------------------------

man_pages = [
    (master_doc, 'artigrasp', 'artigrasp Documentation',
     [author], 1)
]
