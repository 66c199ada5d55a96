# -*- coding: utf-8 -*-
#
# Configuration file for the Sphinx documentation builder.

# -- Path setup --------------------------------------------------------------

import os
import sys
sys.path.insert(0, os.path.abspath('boxrefine'))


# -- Project information -----------------------------------------------------

project = 'boxrefine'
copyright = '2020, boxrefine contributors'
author = 'boxrefine contributors'

# The short X.Y version
version = '0.1'
# The full version, including alpha/beta/rc tags
release = '0.1.0'


# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.autosummary',
    'sphinx.ext.doctest',
    'sphinx.ext.intersphinx',
    'sphinx.ext.napoleon',
    'sphinx.ext.todo',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
]

napoleon_use_param = False
autosummary_generate = True
autodoc_default_options = {'members': None,
                           'show-inheritance': None,
                           'member-order': 'groupwise'}

mathjax_config = {
    'TeX': {
        'Macros': {
            'argmin': r'\mathrm{argmin}',
            'giou': r'\mathrm{GIoU}',
            'iou': r'\mathrm{IoU}'
        }
    }
}

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'
language = None
exclude_patterns = []
pygments_style = None


# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'
html_theme_options = {
    'collapse_navigation': False
}
htmlhelp_basename = 'boxrefinedoc'


# -- Options for LaTeX output ------------------------------------------------

latex_documents = [
    (master_doc, 'boxrefine.tex', 'boxrefine Documentation',
     'boxrefine contributors', 'manual'),
]


# -- Options for manual page output ------------------------------------------

man_pages = [
    (master_doc, 'boxrefine', 'boxrefine Documentation',
     [author], 1)
]


# -- Extension configuration -------------------------------------------------

intersphinx_mapping = {'python': ('https://docs.python.org/3', None),
                       'numpy': ('https://docs.scipy.org/doc/numpy/', None),
                       'sklearn': ('https://scikit-learn.org/stable/', None)}

todo_include_todos = False
