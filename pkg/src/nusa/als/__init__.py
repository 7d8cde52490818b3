from .service import AggregationLoginServer, Session, Ticket
from .wire import ProtocolClient, ProtocolServer, DirectTransport, SocketTransport

__all__ = [
    "AggregationLoginServer",
    "Session",
    "Ticket",
    "ProtocolClient",
    "ProtocolServer",
    "DirectTransport",
    "SocketTransport",
]
