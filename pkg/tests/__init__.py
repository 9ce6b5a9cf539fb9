"""Tests for CSFIQA."""
