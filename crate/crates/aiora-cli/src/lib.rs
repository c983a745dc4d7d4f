//! Library surface of the `aiora` binary: the northbound API server, shared
//! by the `serve` subcommand and the integration tests.

pub mod server;
