use std::cmp::Ordering;

use crate::model::ContextValue;

/// Total order over competing values of one category; the greater value
/// wins. Keys: reliability, then recency, then the lexicographically
/// smaller source id, then the canonical payload text.
pub fn conflict_order(a: &ContextValue, b: &ContextValue) -> Ordering {
    a.reliability
        .total_cmp(&b.reliability)
        .then(a.ts.cmp(&b.ts))
        .then_with(|| b.source_id.cmp(&a.source_id))
        .then_with(|| payload_key(b).cmp(&payload_key(a)))
}

fn payload_key(v: &ContextValue) -> String {
    serde_json::to_string(&v.payload).unwrap_or_default()
}

/// The winning candidate, or `None` for an empty list.
pub fn resolve_conflict(candidates: &[ContextValue]) -> Option<&ContextValue> {
    candidates.iter().reduce(|best, c| {
        if conflict_order(c, best) == Ordering::Greater {
            c
        } else {
            best
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(source: &str, rel: f64, ts: u64, payload: &str) -> ContextValue {
        ContextValue::new("weather", payload, ts, source, rel)
    }

    #[test]
    fn certified_source_beats_social_feed() {
        let c = [
            v("social-feed", 0.4, 600, "clear"),
            v("weather-service", 0.9, 600, "thunderstorm"),
        ];
        assert_eq!(resolve_conflict(&c).unwrap().source_id, "weather-service");
    }

    #[test]
    fn single_candidate_and_empty() {
        let c = [v("a", 0.5, 1, "x")];
        assert_eq!(resolve_conflict(&c), Some(&c[0]));
        assert_eq!(resolve_conflict(&[]), None);
    }

    #[test]
    fn ties_fall_through_to_recency_then_source() {
        let c = [
            v("b", 0.5, 3, "x"),
            v("a", 0.5, 3, "x"),
            v("c", 0.5, 2, "x"),
        ];
        assert_eq!(resolve_conflict(&c).unwrap().source_id, "a");
        let c = [v("a", 0.5, 2, "x"), v("z", 0.5, 3, "x")];
        assert_eq!(resolve_conflict(&c).unwrap().source_id, "z");
    }

    fn arb_value() -> impl Strategy<Value = ContextValue> {
        (0u8..3, 0u8..4, 0u64..3, 0u8..3)
            .prop_map(|(s, r, ts, p)| v(&format!("s{s}"), f64::from(r) / 4.0, ts, &format!("p{p}")))
    }

    proptest! {
        #[test]
        fn order_is_antisymmetric_and_transitive(a in arb_value(), b in arb_value(), c in arb_value()) {
            prop_assert_eq!(conflict_order(&a, &b), conflict_order(&b, &a).reverse());
            if conflict_order(&a, &b) != Ordering::Less && conflict_order(&b, &c) != Ordering::Less {
                prop_assert_ne!(conflict_order(&a, &c), Ordering::Less);
            }
            if conflict_order(&a, &b) == Ordering::Equal {
                prop_assert_eq!(&a.payload, &b.payload);
                prop_assert_eq!(&a.source_id, &b.source_id);
            }
        }

        #[test]
        fn winner_is_independent_of_candidate_order(mut vs in prop::collection::vec(arb_value(), 1..6)) {
            let w = resolve_conflict(&vs).cloned().unwrap();
            vs.reverse();
            prop_assert_eq!(conflict_order(resolve_conflict(&vs).unwrap(), &w), Ordering::Equal);
        }
    }
}
