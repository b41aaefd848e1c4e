"""Early warning of acute critical illness from hourly clinical event grids, with relevance explanations."""
__version__ = "0.1.0"
