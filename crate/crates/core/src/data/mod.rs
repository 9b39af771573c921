//! Sector-level market data: the aligned [`SectorPanel`], file ingestion and
//! synthetic generation.

mod load;
mod panel;
mod synth;

pub use load::{load_panel, write_panel, ColumnSchema, LoadReport};
pub use panel::{SectorPanel, SplitIndices, SplitSpec, CAP_SHARE_SUM_TOLERANCE};
pub use synth::{leader_rule, synth_panel, Regime, SynthSpec, LEADER_LAG};

/// Longest indicator window plus the observation sequence length.
pub const MIN_HISTORY: usize = 60;
