"""Behavioural credit-risk rating: default classifier, beta calibration,
rating master scale, TreeSHAP explanations and Central Credit Register
feature mapping."""

__version__ = "0.1.0"
