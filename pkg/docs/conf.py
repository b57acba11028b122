# Configuration file for the Sphinx documentation builder.
#
# For the full list of built-in configuration values, see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

import sys

# -- Project information -----------------------------------------------------
# https://www.sphinx-doc.org/en/master/usage/configuration.html#project-information

project = 'group-contrast'
copyright = '2024, ChaosInventor'
author = 'ChaosInventor'
release = '0.1'

sys.path.append('..')

# -- General configuration ---------------------------------------------------
# https://www.sphinx-doc.org/en/master/usage/configuration.html#general-configuration

extensions = ['sphinx.ext.autodoc']

templates_path = ['_templates']
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

rst_prolog = """
.. |Graph| replace:: :py:class:`Graph <group_contrast.numerics.Graph>`
.. |Node| replace:: :py:class:`Node <group_contrast.nodes.Node>`
.. |Leaf| replace:: :py:class:`Leaf <group_contrast.nodes.Leaf>`
.. |Primitive| replace:: :py:class:`Primitive <group_contrast.nodes.Primitive>`
.. |AdamState| replace:: :py:class:`AdamState <group_contrast.numerics.AdamState>`
.. |GradCheckReport| replace:: :py:class:`GradCheckReport <group_contrast.numerics.GradCheckReport>`
.. |EegSample| replace:: :py:class:`EegSample <group_contrast.corpus.EegSample>`
.. |Corpus| replace:: :py:class:`Corpus <group_contrast.corpus.Corpus>`
.. |SyntheticSpec| replace:: :py:class:`SyntheticSpec <group_contrast.corpus.SyntheticSpec>`
.. |SamplerConfig| replace:: :py:class:`SamplerConfig <group_contrast.grouping.SamplerConfig>`
.. |GroupBatch| replace:: :py:class:`GroupBatch <group_contrast.grouping.GroupBatch>`
.. |AugmentedBatch| replace:: :py:class:`AugmentedBatch <group_contrast.grouping.AugmentedBatch>`
.. |ModelBundle| replace:: :py:class:`ModelBundle <group_contrast.network.ModelBundle>`
.. |Binding| replace:: :py:class:`Binding <group_contrast.network.Binding>`
.. |PretrainConfig| replace:: :py:class:`PretrainConfig <group_contrast.objective.PretrainConfig>`
.. |FinetuneConfig| replace:: :py:class:`FinetuneConfig <group_contrast.objective.FinetuneConfig>`
.. |RunLog| replace:: :py:class:`RunLog <group_contrast.objective.RunLog>`
.. |RunConfig| replace:: :py:class:`RunConfig <group_contrast.config.RunConfig>`
.. |GroupContrastError| replace:: :py:class:`GroupContrastError <group_contrast.GroupContrastError>`
.. |ContractError| replace:: :py:class:`ContractError <group_contrast.ContractError>`
.. |ConfigurationError| replace:: :py:class:`ConfigurationError <group_contrast.ConfigurationError>`
.. |DimensionError| replace:: :py:class:`DimensionError <group_contrast.nodes.DimensionError>`
.. |DegenerateRepresentationError| replace:: :py:class:`DegenerateRepresentationError <group_contrast.nodes.DegenerateRepresentationError>`
.. |FormatError| replace:: :py:class:`FormatError <group_contrast.corpus.FormatError>`
.. |DivergenceError| replace:: :py:class:`DivergenceError <group_contrast.objective.DivergenceError>`
"""

# -- Options for HTML output -------------------------------------------------
# https://www.sphinx-doc.org/en/master/usage/configuration.html#options-for-html-output

html_theme = 'alabaster'
html_static_path = ['_static']
