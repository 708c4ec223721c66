"""Tests for pychangen."""
