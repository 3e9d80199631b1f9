//! Inputs shared by the benchmarks.

use bytes::Bytes;
use dan_core::backend::synthetic_rowset;
use dan_core::model::{encode_object, CalibKey};

pub fn smt_key(run: u64) -> CalibKey {
    CalibKey::new("smt_ped", run, "v1").expect("valid key")
}

/// An encoded synthetic pedestal/gain object of `rows` rows.
pub fn smt_object(run: u64, rows: u64) -> Bytes {
    let key = smt_key(run);
    Bytes::from(encode_object(&key, &synthetic_rowset(rows, run)).expect("encodes"))
}
