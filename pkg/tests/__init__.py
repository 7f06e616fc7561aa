"""Test suite for the dscs-audit toolkit."""
