"""fedrelay: a multi-job federated learning runtime with reliable messaging
and a local-proxy bridge that tunnels an unmodified guest FL app's
client/server protocol."""

__version__ = "0.1.0"
