"""Desk-scale pipeline glue: synthetic data, file formats, configuration, stages."""
