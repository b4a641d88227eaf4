pub mod booth;
pub mod codec;
pub mod consensus;
pub mod cost;
pub mod crypto;
pub mod engine;
pub mod gossip;
pub mod harness;
pub mod ledger;
pub mod mmu;
pub mod netsim;
pub mod node;
pub mod ordering;
pub mod realtime;
pub mod sim;
pub mod storage;
pub mod time;
pub mod wire;
