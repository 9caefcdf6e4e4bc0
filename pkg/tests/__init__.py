"""Test suite for cloud-cluster detection."""
