//! Audit toolkit for IP-geolocation databases: measures how far and how
//! wrongly a database places real users, bounds how good the database
//! could ever get by reassigning addresses to their closest anchors, and
//! simulates whether GeoIP or GPS inventory is the cheaper way to run a
//! location-targeted ad campaign.

pub mod anchor;
pub mod campaign;
pub mod events;
pub mod geo;
pub mod ip;
pub mod metrics;
pub mod oracle;
pub mod region;
pub mod report;
pub mod synth;

use serde::{Deserialize, Serialize};

/// Unix epoch seconds, UTC.
pub type Timestamp = i64;

/// A half-open time interval [from, to).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub from: Timestamp,
    pub to: Timestamp,
}

impl TimeWindow {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.from <= t && t < self.to
    }

    pub fn span(&self) -> i64 {
        self.to - self.from
    }
}
