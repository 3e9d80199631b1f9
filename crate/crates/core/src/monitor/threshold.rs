//! Sliding-window counter thresholds.
//!
//! A rule watches one counter. Each increment is stamped with its event
//! time; the window is the half-open interval `(now - window_s, now]`. When
//! the windowed total first exceeds `limit` the rule fires once and
//! disarms. It re-arms at the next increment where the windowed total is
//! back at or below `limit`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::event::{Event, Severity};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub counter: String,
    pub window_s: u64,
    pub limit: u64,
}

impl ThresholdRule {
    pub fn validate(&self) -> Result<(), String> {
        if self.window_s == 0 {
            return Err(format!("rule for {}: window_s must be at least 1", self.counter));
        }
        if self.limit == 0 {
            return Err(format!("rule for {}: limit must be at least 1", self.counter));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct RuleState {
    rule: ThresholdRule,
    window: VecDeque<(i64, u64)>,
    total: u64,
    armed: bool,
}

#[derive(Debug, Default)]
pub struct ThresholdTracker {
    rules: Vec<RuleState>,
}

impl ThresholdTracker {
    pub fn new(rules: impl IntoIterator<Item = ThresholdRule>) -> Self {
        Self {
            rules: rules
                .into_iter()
                .map(|rule| RuleState {
                    rule,
                    window: VecDeque::new(),
                    total: 0,
                    armed: true,
                })
                .collect(),
        }
    }

    pub fn rules(&self) -> impl Iterator<Item = &ThresholdRule> {
        self.rules.iter().map(|s| &s.rule)
    }

    /// Records `n` increments of `counter` at `at_ms` and returns any
    /// `threshold.exceeded` events that result.
    pub fn record(&mut self, counter: &str, n: u64, at_ms: i64) -> Vec<Event> {
        let mut fired = Vec::new();
        if n == 0 {
            return fired;
        }
        for st in self.rules.iter_mut().filter(|s| s.rule.counter == counter) {
            let horizon = at_ms.saturating_sub(st.rule.window_s as i64 * 1000);
            while let Some(&(t, k)) = st.window.front() {
                if t > horizon {
                    break;
                }
                st.window.pop_front();
                st.total -= k;
            }
            st.window.push_back((at_ms, n));
            st.total += n;
            if st.total > st.rule.limit {
                if st.armed {
                    st.armed = false;
                    fired.push(
                        Event::at_millis(at_ms, Severity::Error, "monitor", "threshold.exceeded")
                            .attr("counter", &st.rule.counter)
                            .attr("window_s", st.rule.window_s)
                            .attr("limit", st.rule.limit)
                            .attr("observed", st.total),
                    );
                }
            } else {
                st.armed = true;
            }
        }
        fired
    }
}
