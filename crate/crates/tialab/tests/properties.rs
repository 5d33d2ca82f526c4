use proptest::prelude::*;
use tialab::config::RunConfig;
use tialab::tables::{parse_proposals, proposals_table, results_table, ProposalRow, Table};
use tialab_core::eval::{mean_ap, EvalConfig, GroundTruth, Prediction};

fn cell() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z0-9_.]{1,8}",
        "[ -~]{0,12}",
        Just("#hash".to_string()),
        Just("a,b".to_string()),
        Just("say \"x\"".to_string()),
        Just("two\nlines".to_string()),
    ]
}

fn table() -> impl Strategy<Value = Table> {
    (1usize..5).prop_flat_map(|w| {
        (
            prop::collection::vec("[ -~]{0,20}", 0..3),
            prop::collection::vec("[a-z_]{1,6}", w),
            prop::collection::vec(prop::collection::vec(cell(), w), 0..6),
        )
            .prop_map(|(notes, header, rows)| {
                let mut t = Table::new(header);
                for n in notes {
                    t.note(n);
                }
                for r in rows {
                    // a lone empty cell is an empty line, which csv skips
                    if r.len() == 1 && r[0].is_empty() {
                        continue;
                    }
                    t.push(r);
                }
                t
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn any_table_reparses(t in table()) {
        let text = String::from_utf8(t.to_bytes()).unwrap();
        let back = Table::parse(&text, "t").unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn proposals_reparse_within_rounding(rows in prop::collection::vec(
        ("[a-z0-9_]{1,6}", 0.0f64..1e4, 0.0f64..100.0, 0usize..20, 0.0f64..1.0).prop_map(|(video_id, s, l, class, score)| ProposalRow {
            video_id,
            t_start: s,
            t_end: s + l,
            class,
            score,
        }),
        0..20,
    )) {
        let text = proposals_table(&rows).to_bytes();
        let back = parse_proposals(&Table::parse(std::str::from_utf8(&text).unwrap(), "p").unwrap(), "p").unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            prop_assert_eq!(&a.video_id, &b.video_id);
            prop_assert_eq!(a.class, b.class);
            for (x, y) in [(a.t_start, b.t_start), (a.t_end, b.t_end), (a.score, b.score)] {
                prop_assert!((x - y).abs() <= 5e-7 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn results_reparse(n in 1usize..6, seed in 0u32..1000) {
        let gts: Vec<GroundTruth> = (0..n)
            .map(|i| GroundTruth { video: 0, t_start: i as f64 * 3.0, t_end: i as f64 * 3.0 + 2.0, class: i % 3 })
            .collect();
        let preds: Vec<Prediction> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| Prediction {
                video: 0,
                t_start: g.t_start + ((seed as usize + i) % 3) as f64 * 0.5,
                t_end: g.t_end,
                class: g.class,
                score: 1.0 / (i + 1) as f64,
            })
            .collect();
        let r = mean_ap(&preds, &gts, 3, &EvalConfig::default()).unwrap();
        let t = results_table(&r);
        let back = Table::parse(std::str::from_utf8(&t.to_bytes()).unwrap(), "r").unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn config_echo_round_trips(
        seed in any::<u64>(),
        lr in 1e-6f64..1.0,
        noise in 0.0f64..2.0,
        mode in prop::sample::select(vec!["frozen", "full_ft", "adapter_inside", "adapter_outside", "full_ft_plus_tia"]),
        bounds in prop::collection::vec(1.0f64..64.0, 3),
    ) {
        let mut c = RunConfig::default();
        c.set("seed", &seed.to_string()).unwrap();
        c.set("train.lr", &lr.to_string()).unwrap();
        c.set("data.noise", &noise.to_string()).unwrap();
        c.set("model.mode", mode).unwrap();
        let mut b = bounds.clone();
        b.sort_by(f64::total_cmp);
        let joined: Vec<String> = b.iter().map(|x| x.to_string()).collect();
        c.set("head.range_bounds", &joined.join(",")).unwrap();
        let back = RunConfig::from_text(&c.echo()).unwrap();
        prop_assert_eq!(back.echo(), c.echo());
        prop_assert_eq!(back.train_config(), c.train_config());
        prop_assert_eq!(back.data_spec(), c.data_spec());
    }
}
