# Configuration file for the Sphinx documentation builder.
#
# For the full list of built-in configuration values, see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html


import os
import shutil

SCRIPT_DIR = os.path.abspath(os.path.dirname(__file__))
PACKAGE    = "ldnkit"


# -- Project information -----------------------------------------------------

project   = "ldnkit"
copyright = "2026, The ldnkit developers"
author    = "The ldnkit developers"


# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.duration",
    "sphinx.ext.autodoc",
    "sphinx.ext.intersphinx",
    "sphinx.ext.autosummary",
    "sphinx.ext.mathjax",
    "myst_parser",
]

templates_path = ["_templates"]
exclude_patterns = []

rst_prolog = """
.. role:: python(code)
   :language: python
"""

intersphinx_mapping = {
    "python":  ("https://docs.python.org/3", None),
    "numpy":   ("https://numpy.org/doc/stable/", None),
    "scipy":   ("https://docs.scipy.org/doc/scipy/", None),
    "skimage": ("https://scikit-image.org/docs/stable/", None),
}

myst_enable_extensions = [
    "deflist",
    "smartquotes",
    "attrs_block",
]
myst_heading_anchors = 2


# -- Autodoc -------------------------------------------------------------------

add_module_names = False
autodoc_class_signature = "separated"
autodoc_member_order = "bysource"
autodoc_type_aliases = {"TensorLike": "TensorLike", "Shape": "Shape"}


# -- Options for HTML output -------------------------------------------------

extensions += ["sphinx_immaterial"]
html_theme = "sphinx_immaterial"
html_theme_options = {
    "icon": {
        "repo": "fontawesome/brands/github",
        "edit": "material/file-edit-outline",
    },
    "repo_url": "https://github.com/ldnkit/ldnkit",
    "repo_name": "ldnkit",
    "edit_uri": "blob/main/docs/source",
    "globaltoc_collapse": False,
    "features": [
        "navigation.tracking",
        "toc.follow",
    ],
    "palette": [
        {
            "media": "(prefers-color-scheme: dark)",
            "scheme": "slate",
            "primary": "teal",
            "accent": "amber",
            "toggle": {
                "icon": "material/weather-sunny",
                "name": "Switch to light mode",
            },
        },
        {
            "media": "(prefers-color-scheme: light)",
            "scheme": "default",
            "primary": "teal",
            "accent": "deep-orange",
            "toggle": {
                "icon": "material/weather-night",
                "name": "Switch to dark mode",
            },
        },
    ],
    "toc_title_is_page_title": True,
    "social": [
        {
            "icon": "fontawesome/brands/github",
            "link": "https://github.com/ldnkit/ldnkit",
            "name": "Source on github.com",
        },
    ],
}


# -- API Reference -----------------------------------------------------------

def generate_reference():
    shutil.rmtree(f"{SCRIPT_DIR}/api/", ignore_errors=True)
    os.makedirs(f"{SCRIPT_DIR}/api/", exist_ok=True)

    # The package is flat; every module except the entry point gets a page.
    target_names = [PACKAGE]
    for filename in sorted(os.listdir(f"{SCRIPT_DIR}/../../src/{PACKAGE}")):
        if not filename.endswith(".py") or filename in ("__init__.py", "__main__.py"):
            continue
        target_names.append(f"{PACKAGE}.{filename[:-3]}")

    content = "\n".join([
        "API Reference",
        "=============",
        f"This part of the documentation details every public object of {PACKAGE}.",
        "",
        ".. rubric:: Modules",
        "",
        ".. autosummary::",
        "   :toctree: .",
        "   :template: autosummary/module-template.rst",
        "",
        *(f"   {name}" for name in target_names),
    ]) + "\n"

    with open(f"{SCRIPT_DIR}/api/index.rst", "w") as file:
        file.write(content)

generate_reference()
