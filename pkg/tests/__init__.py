"""Tests for RFQ Dashboard."""
