use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use commander_core::domain::{
    label_codec, serialize_report, AgentReport, CommanderVerdict, Label, Payload, RoutingDecision, Sample,
    SubtaskKind, Suppression, Trace, NUM_SUBTASKS,
};
use commander_core::endpoint::{validate_messages, ChatMessage, ContentPart, ImageSource, Role};
use commander_core::evaluation::{parse_dataset, Metrics};
use commander_core::router::{decide_from_flags, route_decide_with, RouterParams};

fn subtask() -> impl Strategy<Value = SubtaskKind> {
    (0..NUM_SUBTASKS).prop_map(|i| SubtaskKind::from_index(i).unwrap())
}

fn subtask_set() -> impl Strategy<Value = BTreeSet<SubtaskKind>> {
    proptest::collection::btree_set(subtask(), 0..=NUM_SUBTASKS)
}

fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..10.0, len).prop_filter_map("all zero", |v| {
        let sum: f64 = v.iter().sum();
        (sum > 1e-6).then(|| v.iter().map(|x| x / sum).collect())
    })
}

fn report(k: SubtaskKind) -> BoxedStrategy<AgentReport> {
    let meta = (0.0f64..=1.0, "[a-z]{1,8}@[a-z]{1,6}", 0u64..10_000);
    match k.vector_categories() {
        Some(cats) => (simplex(cats.len()), meta)
            .prop_map(move |(v, (c, id, ms))| AgentReport::new(k, Payload::Vector(v), c, id, ms).unwrap())
            .boxed(),
        None => ("\\PC{0,40}", meta)
            .prop_map(move |(t, (c, id, ms))| AgentReport::new(k, Payload::Text(t), c, id, ms).unwrap())
            .boxed(),
    }
}

fn routing() -> impl Strategy<Value = RoutingDecision> {
    (
        any::<bool>(),
        proptest::array::uniform6(0.0f64..=1.0),
        proptest::array::uniform6(0.0f64..=1.0),
        proptest::array::uniform6(any::<bool>()),
        subtask_set(),
        subtask_set(),
        any::<bool>(),
    )
        .prop_map(|(learned, probs, alphas, flags, pins, suppress, no_image)| {
            let mut d = if learned {
                route_decide_with(&probs, &alphas, &pins)
            } else {
                decide_from_flags(flags, &pins)
            };
            for k in suppress {
                let reason = if no_image && k.requires_image() {
                    Suppression::NoImage
                } else {
                    Suppression::Dropped
                };
                d.suppress(k, reason);
            }
            d
        })
}

fn verdict() -> impl Strategy<Value = CommanderVerdict> {
    prop_oneof![
        (0.0f64..=1.0).prop_map(|p| CommanderVerdict::from_probs(p, 1.0 - p).unwrap()),
        (any::<bool>(), proptest::option::of("\\PC{0,30}"), any::<bool>()).prop_map(|(s, r, fallback)| {
            let label = if s { Label::Sarcastic } else { Label::NonSarcastic };
            let mut v = CommanderVerdict::language_model(label, r);
            v.fallback = fallback;
            v
        }),
    ]
}

fn trace() -> impl Strategy<Value = Trace> {
    (routing(), "[a-z0-9-]{1,12}", verdict(), 0u64..100_000, any::<u64>())
        .prop_flat_map(|(routing, id, verdict, wall_ms, seed)| {
            let active: Vec<SubtaskKind> = routing.active.iter().copied().collect();
            let reports: Vec<BoxedStrategy<AgentReport>> = active.iter().map(|&k| report(k)).collect();
            (Just(routing), Just(id), Just(verdict), Just(wall_ms), Just(seed), reports)
        })
        .prop_map(|(routing, sample_id, verdict, wall_ms, seed, reports)| {
            let mut failed = BTreeMap::new();
            let mut kept = BTreeMap::new();
            for (i, r) in reports.into_iter().enumerate() {
                if (seed >> (i % 64)) & 3 == 0 {
                    failed.insert(r.subtask, "transport error: timeout".to_string());
                } else {
                    kept.insert(r.subtask, r);
                }
            }
            Trace {
                sample_id,
                routing: Some(routing),
                reports: kept,
                failed,
                verdict: Some(verdict),
                error: None,
                wall_ms,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn trace_round_trip(t in trace()) {
        let line = t.to_json_line();
        let back: Trace = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(back.to_json_line(), line);
    }

    #[test]
    fn report_insertion_order_is_irrelevant(t in trace(), rotate in 0usize..6) {
        let mut items: Vec<(SubtaskKind, AgentReport)> = t.reports.clone().into_iter().collect();
        items.reverse();
        if !items.is_empty() {
            let n = rotate % items.len();
            items.rotate_left(n);
        }
        let mut shuffled = t.clone();
        shuffled.reports = BTreeMap::new();
        for (k, r) in items {
            shuffled.reports.insert(k, r);
        }
        prop_assert_eq!(shuffled.to_json_line(), t.to_json_line());
    }

    #[test]
    fn vector_payloads_stay_normalized(k in subtask(), raw in proptest::collection::vec(0.0f64..1.0, 3..=7), c in 0.0f64..=1.0) {
        let sum: f64 = raw.iter().sum();
        prop_assume!(sum > 1e-9);
        let scaled: Vec<f64> = raw.iter().map(|x| x / sum).collect();
        match AgentReport::new(k, Payload::Vector(scaled.clone()), c, "a", 0) {
            Ok(r) => {
                let Payload::Vector(v) = &r.payload else { panic!("vector expected") };
                let want = k.vector_categories().unwrap().len();
                prop_assert_eq!(v.len(), want);
                prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                let back: AgentReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
                prop_assert_eq!(back, r);
            }
            Err(_) => prop_assert!(
                k.vector_categories().is_none_or(|cats| cats.len() != scaled.len())
            ),
        }
    }

    #[test]
    fn serialized_report_starts_with_descriptor(k in subtask(), seed in any::<u64>()) {
        let r = match k.vector_categories() {
            Some(cats) => {
                let mut v = vec![0.0; cats.len()];
                v[(seed as usize) % cats.len()] = 1.0;
                AgentReport::vector(k, v).unwrap()
            }
            None => AgentReport::text(k, format!("t{seed}")).unwrap(),
        };
        let line = serialize_report(&r);
        let prefix = format!("{}: ", k.descriptor());
        prop_assert!(line.starts_with(&prefix));
        prop_assert_eq!(serialize_report(&r), line);
    }

    #[test]
    fn verdict_is_argmax_with_ties_to_non(p in 0.0f64..=1.0) {
        let v = CommanderVerdict::from_probs(p, 1.0 - p).unwrap();
        let want = if p > 1.0 - p { Label::Sarcastic } else { Label::NonSarcastic };
        prop_assert_eq!(v.prediction, want);
    }

    #[test]
    fn label_codec_round_trip(s in any::<bool>(), upper in any::<bool>(), pad in "[ \t]{0,2}") {
        let label = if s { Label::Sarcastic } else { Label::NonSarcastic };
        let text = if upper { label.as_str().to_uppercase() } else { label.as_str().to_string() };
        prop_assert_eq!(label_codec(&format!("{pad}{text}{pad}")).unwrap(), label);
        prop_assert_eq!(Label::from_int(i64::from(label.as_u8())).unwrap(), label);
    }

    #[test]
    fn routing_rule_holds(probs in proptest::array::uniform6(0.0f64..=1.0), alphas in proptest::array::uniform6(0.0f64..=1.0), pins in subtask_set()) {
        let d = route_decide_with(&probs, &alphas, &pins);
        prop_assert!(d.active.len() <= NUM_SUBTASKS);
        if !d.fallback {
            for k in SubtaskKind::ALL {
                let i = k.index();
                prop_assert_eq!(d.active.contains(&k), probs[i] > alphas[i] || pins.contains(&k));
            }
        } else {
            prop_assert!(SubtaskKind::ALL.iter().all(|k| probs[k.index()] <= alphas[k.index()] && !pins.contains(k)));
        }
    }

    #[test]
    fn router_params_round_trip(d in 1usize..6, seed in any::<u64>(), pins in subtask_set()) {
        let mut p = RouterParams::zeros(d);
        for k in 0..NUM_SUBTASKS {
            p.weights[k] = (0..d).map(|j| ((seed >> ((k + j) % 60)) & 0xff) as f64 / 37.0 - 3.0).collect();
            p.biases[k] = (seed % 97) as f64 / 13.0;
            p.thresholds[k] = ((seed >> k) % 101) as f64 / 100.0;
        }
        p.pinned = pins;
        p.validate().unwrap();
        let back: RouterParams = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn metric_identities(tp in 0usize..300, fp in 0usize..300, fn_ in 0usize..300, tn in 0usize..300) {
        prop_assume!(tp + fp + fn_ + tn > 0);
        let m = Metrics::from_counts(tp, fp, fn_, tn);
        prop_assert_eq!(m.accuracy, (tp + tn) as f64 / (tp + fp + fn_ + tn) as f64);
        let p_defined = tp + fp > 0;
        let r_defined = tp + fn_ > 0;
        if p_defined { prop_assert_eq!(m.precision, tp as f64 / (tp + fp) as f64); } else { prop_assert_eq!(m.precision, 0.0); }
        if r_defined { prop_assert_eq!(m.recall, tp as f64 / (tp + fn_) as f64); } else { prop_assert_eq!(m.recall, 0.0); }
        let f_defined = m.precision + m.recall > 0.0;
        if f_defined {
            prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-15);
        } else {
            prop_assert_eq!(m.f1, 0.0);
        }
        prop_assert_eq!(m.degenerate, !(p_defined && r_defined && f_defined));
        prop_assert!([m.accuracy, m.precision, m.recall, m.f1].iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn images_only_in_user_messages(role in 0u8..3, with_image in any::<bool>(), empty in any::<bool>()) {
        let mut parts = if empty { vec![] } else { vec![ContentPart::Text("x".into())] };
        if with_image {
            parts.push(ContentPart::Image(ImageSource::Url("https://img.example/a.png".into())));
        }
        let role = [Role::System, Role::User, Role::Assistant][role as usize];
        let message = ChatMessage { role, content: parts.clone() };
        let ok = !parts.is_empty() && (role == Role::User || !with_image);
        prop_assert_eq!(validate_messages(&[message]).is_ok(), ok);
    }

    #[test]
    fn dataset_lines_round_trip(rows in proptest::collection::vec((proptest::option::of(any::<bool>()), any::<bool>(), "\\PC{0,20}"), 1..20)) {
        let samples: Vec<Sample> = rows
            .iter()
            .enumerate()
            .map(|(i, (label, image, text))| {
                let mut s = Sample::new(format!("id{i}"), text.clone());
                if *image {
                    s = s.with_image(format!("img/{i}.jpg"));
                }
                if let Some(l) = label {
                    s = s.with_label(if *l { Label::Sarcastic } else { Label::NonSarcastic });
                }
                s
            })
            .collect();
        let mut jsonl = String::new();
        for s in &samples {
            let mut obj = serde_json::json!({"id": s.id, "text": s.text});
            if let Some(img) = &s.image_ref {
                obj["image_path"] = img.clone().into();
            }
            if let Some(l) = s.gold_label {
                obj["label"] = l.as_u8().into();
            }
            jsonl.push_str(&obj.to_string());
            jsonl.push('\n');
        }
        prop_assert_eq!(parse_dataset(&jsonl).unwrap(), samples);
    }
}
