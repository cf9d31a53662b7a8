"""Server-side WiFi fingerprint localization from RTLS feeds, with a WLAN simulator."""

__version__ = "0.1.0"
