"""Early detection of malicious addresses in UTXO ledgers from asset-transfer paths."""

__version__ = "0.1.0"
