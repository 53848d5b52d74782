//! The capability gate.

mod broker;
mod buffer;
mod envelope;
mod host;
mod pending;
mod route;

pub use broker::{
    AllowAll, Broker, BrokerDecision, BrokerKind, BrokerRequest, Decision, DenyAll, InteractiveBroker, PolicyBroker,
    PolicyDoc, PolicyParseError, Prompter, TerminalPrompter, WebhookBroker, DEFAULT_TIMEOUT, ID_DENY_BY_DEFAULT,
    ID_MANIFEST_DECLARED, ID_TIMEOUT,
};
pub use buffer::{BufferError, BufferState, Staged, TransactionBuffer};
pub use envelope::{EnvelopeError, RequestEnvelope};
pub use host::{apply_write, FsWrite, Handler, Host, HostError, SystemHost};
pub use pending::{PendingQueue, PendingView, QueueError};
pub use route::{
    classify, route_for, Class, ClassifyError, GatePolicyRow, Reversibility, Route, ToolRegistry, POLICY_TABLE,
};
