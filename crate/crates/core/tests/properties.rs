use dtvg_core::grouping::{exact_group, greedy_group, greedy_group_with, knowledge_consistency, rank_list, GreedyOptions, SimTable};
use dtvg_core::merging::{merge, MergeInputs};
use dtvg_core::numkit::{Mat, Rng, Vec64};
use dtvg_core::store_io::{decode_tpvf, encode_tpvf, quantize_f32, TpvfObject};
use dtvg_core::testbed::{make_task_family, FamilySpec, TaskSpec};
use dtvg_core::tpv::{compute_tpv, ScalingTerm, SoftPrompt, TaskPromptVector};
use proptest::prelude::*;

fn table(seed: u64, n: usize) -> SimTable {
    let mut rng = Rng::new(seed);
    let s2t = (0..n).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let mut s2s = Mat::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = 2.0 * rng.uniform() - 1.0;
            s2s.set(i, j, v);
            s2s.set(j, i, v);
        }
    }
    SimTable::from_values(s2t, s2s).unwrap()
}

fn scaling(rng: &mut Rng, id: &str, r: usize) -> ScalingTerm {
    ScalingTerm {
        task_id: id.into(),
        alpha: Vec64::new((0..r).map(|_| 1.0 + 0.5 * rng.normal()).collect()).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn greedy_is_admissible_and_dominated(seed in any::<u64>(), n in 0usize..9, early in any::<bool>(), strict in any::<bool>()) {
        let t = table(seed, n);
        let g = greedy_group_with(&t, GreedyOptions { early_stop: early, strict });
        prop_assert!(g.check_admissible(&t).is_ok());
        for &i in &g.selected {
            prop_assert!(t.s2t()[i] >= 0.0);
        }
        let exact = exact_group(&t, 1.0).unwrap();
        prop_assert!(g.objective <= exact.objective + 1e-12);
    }

    #[test]
    fn early_stop_selects_a_prefix_of_the_full_scan(seed in any::<u64>(), n in 0usize..9) {
        let t = table(seed, n);
        let full = greedy_group(&t);
        let early = greedy_group_with(&t, GreedyOptions { early_stop: true, strict: false });
        prop_assert!(full.selected.starts_with(&early.selected));
    }

    #[test]
    fn rank_list_is_sorted_with_index_ties(seed in any::<u64>(), n in 0usize..12) {
        let mut t = table(seed, n);
        if n > 2 {
            // force a tie between the first two sources
            let mut s2t = t.s2t().to_vec();
            s2t[1] = s2t[0];
            t = SimTable::from_values(s2t, t.s2s().clone()).unwrap();
        }
        let rank = rank_list(&t);
        for w in rank.windows(2) {
            let (a, b) = (t.s2t()[w[0]], t.s2t()[w[1]]);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
    }

    #[test]
    fn pair_gain_is_cross_similarity(seed in any::<u64>(), n in 2usize..8) {
        let t = table(seed, n);
        let kc = knowledge_consistency(&t, &[0, 1]).unwrap();
        prop_assert_eq!(kc - knowledge_consistency(&t, &[0]).unwrap(), t.s2s().get(0, 1));
    }

    #[test]
    fn reconstruction_of_tuned_prompts(seed in any::<u64>(), d in 1usize..20, r in 1usize..10, scale in 1e-3f64..1e3) {
        let mut rng = Rng::new(seed);
        let p_init = SoftPrompt::random(&mut rng, d, r, 0.5);
        let step = Mat::randn(&mut rng, d, r, scale);
        let p_star = SoftPrompt::new(p_init.weights().add(&step).unwrap());
        let t = compute_tpv(&p_star, &p_init, "t").unwrap();
        prop_assert_eq!(t.apply(&p_init).unwrap(), p_star);
    }

    #[test]
    fn merge_linearity_and_order(seed in any::<u64>(), d in 1usize..10, r in 1usize..6, n_src in 0usize..5) {
        let mut rng = Rng::new(seed);
        let p_init = SoftPrompt::random(&mut rng, d, r, 0.5);
        let fp = p_init.fingerprint();
        let target = TaskPromptVector::new("t", Mat::randn(&mut rng, d, r, 1.0), fp);
        let a_t = scaling(&mut rng, "t", r);
        let srcs: Vec<(TaskPromptVector, ScalingTerm)> = (0..n_src)
            .map(|k| {
                let id = format!("s{k}");
                (TaskPromptVector::new(id.clone(), Mat::randn(&mut rng, d, r, 1.0), fp), scaling(&mut rng, &id, r))
            })
            .collect();
        let mk = |alpha: &ScalingTerm, order: &[usize]| {
            merge(&MergeInputs {
                p_init: &p_init,
                target_tpv: &target,
                target_alpha: alpha,
                sources: order.iter().map(|&i| (&srcs[i].0, &srcs[i].1)).collect(),
            })
            .unwrap()
        };
        let order: Vec<usize> = (0..n_src).collect();
        let base = mk(&a_t, &order);
        let doubled = ScalingTerm { task_id: "t".into(), alpha: Vec64::new(a_t.alpha.iter().map(|v| 2.0 * v).collect()).unwrap() };
        let diff = mk(&doubled, &order).weights().sub(base.weights()).unwrap();
        let expected = target.delta().scale_cols(&a_t.alpha).unwrap();
        for (x, y) in diff.as_slice().iter().zip(expected.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()) * 8.0);
        }
        let mut reversed = order.clone();
        reversed.reverse();
        let other = mk(&a_t, &reversed);
        for (x, y) in other.weights().as_slice().iter().zip(base.weights().as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn tpvf_round_trip(seed in any::<u64>(), d in 1usize..24, r in 1usize..12, id in "[a-zA-Z0-9_é-]{0,20}", vector in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let w = quantize_f32(&Mat::randn(&mut rng, d, r, 5.0));
        let obj = if vector {
            TpvfObject::Vector(TaskPromptVector::new(id, w, rng.next_u64()))
        } else {
            TpvfObject::Prompt { task_id: id, prompt: SoftPrompt::new(w) }
        };
        let bytes = encode_tpvf(&obj).unwrap();
        let header = 27 + obj.task_id().len();
        prop_assert_eq!(bytes.len(), header + 4 * d * r);
        prop_assert_eq!(decode_tpvf(&bytes).unwrap(), obj);
        let cut = rng.below(bytes.len());
        prop_assert!(decode_tpvf(&bytes[..cut]).is_err());
    }

    #[test]
    fn task_generation_is_reproducible_and_in_range(seed in any::<u64>(), classes in 2usize..5, noise in 0.0f64..0.5) {
        let spec = FamilySpec {
            noise_rate: noise,
            n_train: 40,
            n_val: 10,
            n_test: 10,
            tasks: vec![
                TaskSpec { id: "a".into(), group: "g0".into(), polarity: 1, share: 1.0 },
                TaskSpec { id: "b".into(), group: "g0".into(), polarity: -1, share: 1.0 },
            ],
            ..FamilySpec::default()
        };
        let tasks = make_task_family(&spec, classes, 64, seed).unwrap();
        prop_assert_eq!(&tasks, &make_task_family(&spec, classes, 64, seed).unwrap());
        for t in &tasks {
            for e in t.train.iter().chain(&t.val).chain(&t.test) {
                prop_assert!(e.label < classes);
                prop_assert!(e.tokens.iter().all(|&x| x < 64));
                prop_assert_eq!(e.tokens.len(), spec.seq_len);
            }
            let few = t.few_shot(3, seed);
            for c in 0..classes {
                prop_assert!(few.train.iter().filter(|e| e.label == c).count() <= 3);
            }
        }
    }
}
