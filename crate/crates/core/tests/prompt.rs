mod common;

use kicrank::demo::{demonstrations_for, DemonstrationSet};
use kicrank::gateway::Gateway;
use kicrank::prompt::{estimate_tokens, Conductor, Mode, Part, PromptConfig, PromptError, Role, Style, Templates};
use kicrank::verbalize::{AlignedTemplate, Scheme, Verbalizer};
use kicrank::{EntityId, KnowledgeGraph, Query};

use common::{film_kg, test_queries, GENRE};

fn genre_query(kg: &KnowledgeGraph) -> Query {
    test_queries(kg)
        .into_iter()
        .find(|q| kg.relation_name(q.relation) == GENRE && kg.entity_name(q.anchor) == "f0")
        .unwrap()
}

fn candidates(kg: &KnowledgeGraph, names: &[&str]) -> Vec<EntityId> {
    names.iter().map(|n| kg.entity(n).unwrap()).collect()
}

fn huge() -> PromptConfig {
    PromptConfig {
        budget: 1 << 20,
        ..Default::default()
    }
}

fn assert_alternates(msgs: &[&kicrank::prompt::Message]) {
    for pair in msgs.windows(2) {
        assert!(!(pair[0].role == Role::Assistant && pair[1].role == Role::Assistant));
    }
}

#[test]
fn estimator_examples() {
    assert_eq!(estimate_tokens(""), 0);
    assert_eq!(estimate_tokens("abcd"), 1);
    assert_eq!(estimate_tokens("0123456789"), 3);
}

#[test]
fn empty_demos_give_three_stages() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let t = Templates::builtin();
    let cfg = huge();
    let q = genre_query(&kg);
    let conv = Conductor::new(&v, &t, &cfg)
        .build_conversation(&q, &DemonstrationSet::empty(), &candidates(&kg, &["g1", "g2"]))
        .unwrap();
    let parts: Vec<(Role, Part)> = conv.messages().map(|m| (m.role, m.part)).collect();
    assert_eq!(
        parts,
        vec![
            (Role::User, Part::Responsibility),
            (Role::Assistant, Part::Responsibility),
            (Role::User, Part::Description),
            (Role::Assistant, Part::Description),
            (Role::User, Part::FinalQuery),
        ]
    );
    assert_eq!(conv.prefix[1].text, "Yes.");
    assert_eq!(
        conv.prefix[3].text,
        "Okay, I understand. I will wait for your examples and instructions."
    );
}

#[test]
fn sort_final_turn_matches_protocol() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let t = Templates::builtin();
    let cfg = huge();
    let q = genre_query(&kg);
    let demos = demonstrations_for(&kg, &v, &q, 3);
    let conv = Conductor::new(&v, &t, &cfg)
        .build_conversation(&q, &demos, &candidates(&kg, &["g1", "g2", "f0"]))
        .unwrap();
    let last = &conv.finals[0].text;
    assert!(last.starts_with(
        "The list of candidate answers is [genre number 1, genre number 2, Modern Times]. And the question is predict the tail entity [MASK] from the given (Modern Times,genre of film of film, [MASK])"
    ));
    assert!(last.contains("start your response with \"The final order:\""));
    assert!(conv.prefix[2]
        .text
        .starts_with("The goal question is: predict the tail entity [MASK]"));
    let demo_turn = &conv.prefix[4].text;
    assert!(demo_turn.starts_with("Examples used to Analogy: \"predict the tail entity [MASK]"));
    assert!(demo_turn.contains("\n\nExamples give supplement information: \""));
    assert!(demo_turn.ends_with("  Keep thinking but not output."));
    assert_alternates(&conv.messages().collect::<Vec<_>>());
}

#[test]
fn batches_interleave_both_streams() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let t = Templates::builtin();
    let cfg = PromptConfig {
        demo_batch_size: 3,
        ..huge()
    };
    let q = genre_query(&kg);
    let demos = demonstrations_for(&kg, &v, &q, 3);
    let conv = Conductor::new(&v, &t, &cfg)
        .build_conversation(&q, &demos, &candidates(&kg, &["g1"]))
        .unwrap();
    assert_eq!(conv.analogy_used, demos.analogy_order.len());
    assert_eq!(conv.supplement_used, demos.supplement_order.len());
    let turns: Vec<&str> = conv
        .prefix
        .iter()
        .filter(|m| m.part == Part::Demonstrations && m.role == Role::User)
        .map(|m| m.text.as_str())
        .collect();
    assert_eq!(
        turns.len(),
        demos.analogy_order.len().max(demos.supplement_order.len()).div_ceil(3)
    );
    // first batch holds the first three of each ordered stream
    for d in demos
        .analogy_order
        .iter()
        .take(3)
        .chain(demos.supplement_order.iter().take(3))
    {
        assert!(turns[0].contains(&v.demonstration(d, q.direction)));
    }
}

#[test]
fn budget_for_exactly_one_batch() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let t = Templates::builtin();
    let q = genre_query(&kg);
    let demos = demonstrations_for(&kg, &v, &q, 3);
    assert!(demos.analogy_order.len() >= 8 && demos.supplement_order.len() >= 8);
    let cands = candidates(&kg, &["g1", "g2"]);

    let full = Conductor::new(&v, &t, &huge())
        .build_conversation(&q, &demos, &cands)
        .unwrap();
    let cost = |i: usize| estimate_tokens(&full.prefix[4 + 2 * i].text) + estimate_tokens(&full.prefix[5 + 2 * i].text);
    let base = full.prefix[..4].iter().map(|m| estimate_tokens(&m.text)).sum::<usize>()
        + estimate_tokens(&full.finals[0].text);
    let reserve = PromptConfig::default().reply_reserve;
    let cfg = PromptConfig {
        budget: reserve + base + cost(0) + cost(1) - 1,
        ..Default::default()
    };
    let conv = Conductor::new(&v, &t, &cfg)
        .build_conversation(&q, &demos, &cands)
        .unwrap();
    assert_eq!((conv.analogy_used, conv.supplement_used), (4, 4));
    assert!(conv.estimated_tokens + reserve <= cfg.budget);
    assert_eq!(conv.estimated_tokens, base + cost(0));

    let tight = PromptConfig {
        budget: reserve + base - 1,
        ..Default::default()
    };
    assert!(matches!(
        Conductor::new(&v, &t, &tight).build_conversation(&q, &demos, &cands),
        Err(PromptError::BudgetTooSmall { .. })
    ));
}

#[test]
fn every_budget_is_respected() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let t = Templates::builtin();
    let q = genre_query(&kg);
    let demos = demonstrations_for(&kg, &v, &q, 3);
    let cands = candidates(&kg, &["g1", "g2", "g3"]);
    for mode in [Mode::Sort, Mode::Score] {
        for trivial in [false, true] {
            let mut used = Vec::new();
            for budget in (0..4000).step_by(37) {
                let cfg = PromptConfig {
                    budget,
                    reply_reserve: 100,
                    mode,
                    trivial_prompt: trivial,
                    demo_batch_size: 2,
                    ..Default::default()
                };
                if let Ok(conv) = Conductor::new(&v, &t, &cfg).build_conversation(&q, &demos, &cands) {
                    let longest = conv.finals.iter().map(|m| estimate_tokens(&m.text)).max().unwrap();
                    let prefix: usize = conv.prefix.iter().map(|m| estimate_tokens(&m.text)).sum();
                    assert_eq!(conv.estimated_tokens, prefix + longest);
                    assert!(conv.estimated_tokens + 100 <= budget);
                    used.push(conv.analogy_used);
                }
            }
            assert!(!used.is_empty());
            assert!(
                used.windows(2).all(|w| w[0] <= w[1]),
                "more budget never means fewer demos"
            );
        }
    }
}

#[test]
fn score_mode_has_one_turn_per_candidate() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::WordnetInfix);
    let t = Templates::builtin();
    let cfg = PromptConfig {
        mode: Mode::Score,
        style: Style::Wordnet,
        ..huge()
    };
    let q = genre_query(&kg);
    let cands = candidates(&kg, &["g1", "g2", "g3"]);
    let conv = Conductor::new(&v, &t, &cfg)
        .build_conversation(&q, &DemonstrationSet::empty(), &cands)
        .unwrap();
    assert_eq!(conv.finals.len(), 3);
    assert!(conv.finals[1]
        .text
        .ends_with("Directly give a score out of 100 for the statement and DO NOT output any other thing."));
    assert!(conv.finals[1].text.contains("genre number 2"));
    assert!(conv.prefix[0]
        .text
        .starts_with("Assume you're a linguist of English lexicons."));
    assert_eq!(conv.prefix[3].text, "Okay.");
    assert_eq!(conv.request(2).last().unwrap(), &conv.finals[2]);
    assert_eq!(conv.request(2).len(), conv.prefix.len() + 1);
}

#[test]
fn trivial_prompt_is_one_message() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let t = Templates::builtin();
    let cfg = PromptConfig {
        trivial_prompt: true,
        ..huge()
    };
    let q = genre_query(&kg);
    let demos = demonstrations_for(&kg, &v, &q, 3);
    let conv = Conductor::new(&v, &t, &cfg)
        .build_conversation(&q, &demos, &candidates(&kg, &["g1", "g2"]))
        .unwrap();
    assert!(conv.prefix.is_empty());
    assert_eq!(conv.finals.len(), 1);
    let text = &conv.finals[0].text;
    let first_demo = v.demonstration(&demos.analogy_order[0], q.direction);
    assert!(text.starts_with(&format!("{first_demo}\n")));
    assert!(text.contains("\nThe list of candidate answers is [genre number 1, genre number 2]."));
}

#[test]
fn colliding_names_get_ids() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let names = kicrank::prompt::candidate_names(&v, &candidates(&kg, &["actor0", "g2", "actor1", "actor2"]));
    assert_eq!(
        names,
        [
            "Charlie Chaplin (actor0)",
            "genre number 2",
            "charlie  chaplin (actor1)",
            "actor2"
        ]
    );
}

#[test]
fn identity_and_oracle_rerank() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let t = Templates::builtin();
    let q = genre_query(&kg);
    let cands = candidates(&kg, &["g1", "g10", "g2"]);
    for mode in [Mode::Sort, Mode::Score] {
        let cfg = PromptConfig { mode, ..huge() };
        let c = Conductor::new(&v, &t, &cfg);
        let demos = DemonstrationSet::empty();
        let out = c.rerank_candidates(&q, &demos, &cands, &Gateway::identity()).unwrap();
        assert_eq!(out.order, cands);
        let out = c.rerank_candidates(&q, &demos, &cands, &Gateway::oracle(&[q])).unwrap();
        assert_eq!(out.order, candidates(&kg, &["g10", "g1", "g2"]));
    }
}

#[test]
fn score_mode_sorts_stably() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let t = Templates::builtin();
    let q = genre_query(&kg);
    let cands = candidates(&kg, &["g1", "g2", "g3"]);
    let cfg = PromptConfig {
        mode: Mode::Score,
        ..huge()
    };
    let gw = Gateway::scripted(vec!["50".into(), "90".into(), "50".into()]).unwrap();
    let out = Conductor::new(&v, &t, &cfg)
        .rerank_candidates(&q, &DemonstrationSet::empty(), &cands, &gw)
        .unwrap();
    assert_eq!(out.order, candidates(&kg, &["g2", "g1", "g3"]));
}

#[test]
fn adversarial_replies_still_permute() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let t = Templates::builtin();
    let q = genre_query(&kg);
    let cands = candidates(&kg, &["g1", "g2", "g3", "g4"]);
    let replies: Vec<String> = [
        "The final order: [genre number 2 | genre number 2 | nonsense]",
        "The final order:",
        "[[[ | ] | genre number 4",
        "I refuse.",
        "The final order: [GENRE   number 3 | genre number 9 | Genre Number 1 | genre number 4 | genre number 2]",
        "",
        "The final order: [genre number 1 | genre number 2 | genre number 3 | genre number 4 | extra]",
        "score 500",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let gw = Gateway::scripted(replies.clone()).unwrap();
    for mode in [Mode::Sort, Mode::Score] {
        let cfg = PromptConfig { mode, ..huge() };
        for _ in 0..replies.len() {
            let out = Conductor::new(&v, &t, &cfg)
                .rerank_candidates(&q, &DemonstrationSet::empty(), &cands, &gw)
                .unwrap();
            let mut sorted = out.order.clone();
            sorted.sort();
            let mut expected = cands.clone();
            expected.sort();
            assert_eq!(sorted, expected);
        }
    }
}

#[test]
fn alignment_prompt_shape() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let t = Templates::builtin();
    let r = kg.relation(GENRE).unwrap();
    let pool = kicrank::demo::build_analogy_pool(&kg, r);
    let cfg = huge();
    let conv = Conductor::new(&v, &t, &cfg).build_alignment_prompt(r, &pool).unwrap();
    let text = &conv.finals[0].text;
    assert!(text.starts_with("You are a good assistant to reading, understanding and summarizing.\n"));
    assert!(text.contains("What do you think \"genre of film of film of\" mean?"));
    assert!(text.contains("Fill the mask and the statement should be as short as possible."));
    assert_eq!(conv.analogy_used, pool.len());

    let two = format!(
        "{}\n{}\n{}\n",
        "You are a good assistant to reading, understanding and summarizing.",
        v.verbalize_triple(&pool[0]).unwrap(),
        v.verbalize_triple(&pool[1]).unwrap()
    );
    let fits_two = estimate_tokens(&format!("{two}{}", text.rsplit('\n').next().unwrap()));
    let cfg = PromptConfig {
        budget: 512 + fits_two,
        ..Default::default()
    };
    let conv = Conductor::new(&v, &t, &cfg).build_alignment_prompt(r, &pool).unwrap();
    assert_eq!(conv.analogy_used, 2);
    assert!(conv.finals[0].text.starts_with(&two));

    assert!(matches!(
        Conductor::new(&v, &t, &huge()).build_alignment_prompt(r, &[]),
        Err(PromptError::EmptyAnalogyPool(_))
    ));
}

#[test]
fn identity_alignment_falls_back() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let t = Templates::builtin();
    let r = kg.relation(GENRE).unwrap();
    let pool = kicrank::demo::build_analogy_pool(&kg, r);
    let cfg = huge();
    let c = Conductor::new(&v, &t, &cfg);
    let out = c.align_relation(r, &pool, &Gateway::identity()).unwrap();
    assert!(out.fallback);
    assert_eq!(out.template, AlignedTemplate::fallback(&kg, r));
    let gw = Gateway::scripted(vec![
        "If the example shows something A is genre of film of film of something B, it means A is the genre of the film B.".into(),
    ])
    .unwrap();
    let out = c.align_relation(r, &pool, &gw).unwrap();
    assert!(!out.fallback);
    assert_eq!(out.template.as_str(), "[T] is the genre of the film [H].");
}

#[test]
fn template_overrides_reach_the_prompt() {
    let kg = film_kg();
    let v = Verbalizer::new(&kg, Scheme::FreebaseOfJoin);
    let t = Templates::from_toml(
        "[[template]]\nstage = \"responsibility\"\nmode = \"sort\"\nstyle = \"freebase\"\ntext = \"Rank things.\"\n",
    )
    .unwrap();
    let cfg = huge();
    let q = genre_query(&kg);
    let conv = Conductor::new(&v, &t, &cfg)
        .build_conversation(&q, &DemonstrationSet::empty(), &candidates(&kg, &["g1"]))
        .unwrap();
    assert_eq!(conv.prefix[0].text, "Rank things.");
}
