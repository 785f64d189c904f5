use ctxf_core::kg::*;
use ctxf_core::CoreError;
use proptest::prelude::*;

fn small_graph() -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new(vec!["Cat".into(), "Dog".into()]).unwrap();
    g.add(Term::class("Cat"), "type", Term::class("Mammal")).unwrap();
    g.add(Term::class("Dog"), "type", Term::class("Mammal")).unwrap();
    g.add(Term::class("Mammal"), "type", Term::class("Animal")).unwrap();
    g.add(Term::class("Cat"), "hasColor", Term::individual("gray")).unwrap();
    g.add(Term::class("Dog"), "hasColor", Term::individual("brown"))
        .unwrap();
    g.add(Term::class("Dog"), "hasSound", Term::individual("bark")).unwrap();
    g
}

#[test]
fn kgt_round_trip_is_exact() {
    let g = small_graph();
    let text = g.to_kgt();
    let back = KnowledgeGraph::parse(&text).unwrap();
    assert_eq!(back, g);
    assert_eq!(back.to_kgt(), text);
}

#[test]
fn cifar_graph_round_trips_through_a_file() {
    let g = build_cifar_gkg();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gkg.kgt");
    g.write(&path).unwrap();
    assert_eq!(KnowledgeGraph::read(&path).unwrap(), g);
}

#[test]
fn duplicate_triples_are_ignored() {
    let mut g = small_graph();
    let before = g.len();
    assert!(!g.add(Term::class("Cat"), "hasColor", Term::individual("gray")).unwrap());
    assert_eq!(g.len(), before);
}

#[test]
fn parse_errors_carry_line_numbers() {
    let cases = [
        ("@classes\tA\nC:A\thasColor\n", 2),
        ("@classes\tA\n# comment\nC:A\thasColor\tX:red\n", 3),
        ("@classes\tA\n\nC:A\thas Color\tI:red\n", 3),
        ("@classes\tA\n@classes\tB\n", 2),
        ("@classes\tA\nP:p\trel\tI:x\n", 2),
    ];
    for (text, line) in cases {
        match KnowledgeGraph::parse(text) {
            Err(CoreError::Parse { line: got, .. }) => assert_eq!(got, line, "{text:?}"),
            other => panic!("{text:?} gave {other:?}"),
        }
    }
    assert!(KnowledgeGraph::parse("C:A\ttype\tC:B\n").is_err());
}

#[test]
fn class_list_must_appear_in_graph() {
    let text = "@classes\tA\tB\nC:A\thasColor\tI:red\n";
    assert!(KnowledgeGraph::parse(text).is_err());
}

#[test]
fn cifar_graph_statistics() {
    let s = build_cifar_gkg().stats();
    assert_eq!(s.properties, 16);
    assert_eq!(s.classes, 34);
    assert_eq!(s.individuals, 69);
    assert_eq!(s.triples, 270);
}

// Individuals named by the visual properties of the ten classes, counted
// from the fact table by hand.
const VISUAL_INDIVIDUALS: [&str; 34] = [
    "air",
    "road",
    "forest",
    "house",
    "grass",
    "water", //
    "white",
    "gray",
    "red",
    "black",
    "blue",
    "brown",
    "green", //
    "wings",
    "engine",
    "tail",
    "windows",
    "wheels",
    "eyes",
    "legs",
    "feathers",
    "fur",
    "antlers",
    "hooves",
    "hull", //
    "cross",
    "rectangular",
    "ellipsoid", //
    "large",
    "medium",
    "small", //
    "uniform",
    "dotted",
    "striped",
];

#[test]
fn visual_view_node_count_matches_hand_count() {
    let g = build_cifar_gkg();
    let sub = extract_view(&g, &ViewSpec::standard(ViewName::Visual)).unwrap();
    assert_eq!(sub.n_nodes(), 10 + VISUAL_INDIVIDUALS.len());
    assert_eq!(sub.count_kind(TermKind::Individual), VISUAL_INDIVIDUALS.len());
    for id in VISUAL_INDIVIDUALS {
        assert!(sub.index_of(&Term::individual(id)).is_some(), "{id}");
    }
    assert_eq!(sub.triples().len(), 103);
    assert!(sub
        .triples()
        .iter()
        .all(|t| VISUAL_PREDICATES.contains(&t.relation_id())));
}

#[test]
fn functional_view_node_count_matches_hand_count() {
    // 7 movements, 9 sounds, 3 speeds, 3 weights
    let g = build_cifar_gkg();
    let sub = extract_view(&g, &ViewSpec::standard(ViewName::Functional)).unwrap();
    assert_eq!(sub.n_nodes(), 10 + 22);
}

#[test]
fn taxonomical_view_holds_only_type_chains() {
    let g = build_cifar_gkg();
    let sub = extract_view(&g, &ViewSpec::standard(ViewName::Taxonomical)).unwrap();
    assert!(sub.triples().iter().all(|t| t.relation_id() == TYPE));
    assert_eq!(sub.count_kind(TermKind::Individual), 0);
    // ten dataset classes, 21 intermediate categories, two roots, Monkey
    assert_eq!(sub.n_nodes(), 34);
    let idx = |c: &str| sub.index_of(&Term::class(c)).unwrap();
    assert!(sub.neighbors()[idx("Cat")].contains(&idx("Mammal")));
}

#[test]
fn class_nodes_come_first() {
    let g = build_cifar_gkg();
    for v in [
        ViewName::Visual,
        ViewName::Taxonomical,
        ViewName::Functional,
        ViewName::Full,
    ] {
        let sub = extract_view(&g, &ViewSpec::standard(v)).unwrap();
        for (i, c) in CIFAR_CLASSES.iter().enumerate() {
            assert_eq!(sub.nodes()[i], Term::class(*c));
        }
    }
}

#[test]
fn custom_views_validate_predicates() {
    let g = small_graph();
    assert!(matches!(
        ViewSpec::custom("none", Vec::<String>::new(), false),
        Err(CoreError::View { .. })
    ));
    let spec = ViewSpec::custom("missing", vec!["hasWings".to_string()], false).unwrap();
    assert!(matches!(extract_view(&g, &spec), Err(CoreError::View { .. })));
}

#[test]
fn type_closure_follows_chains_from_selected_nodes() {
    let g = small_graph();
    let plain = ViewSpec::custom("sound", vec!["hasSound".to_string()], false).unwrap();
    let closed = ViewSpec::custom("sound", vec!["hasSound".to_string()], true).unwrap();
    let a = extract_view(&g, &plain).unwrap();
    let b = extract_view(&g, &closed).unwrap();
    assert_eq!(a.triples().len(), 1);
    // Dog -> Mammal -> Animal plus Cat -> Mammal
    assert_eq!(b.triples().len(), 4);
    assert!(b.index_of(&Term::class("Animal")).is_some());
}

#[test]
fn adjacency_is_symmetric_without_self_loops() {
    let g = build_cifar_gkg();
    let sub = extract_view(&g, &ViewSpec::standard(ViewName::Visual)).unwrap();
    let a = sub.adjacency();
    let n = sub.n_nodes();
    let d = a.data();
    for i in 0..n {
        assert_eq!(d[i * n + i], 0.0);
        for j in 0..n {
            assert_eq!(d[i * n + j], d[j * n + i]);
        }
    }
    let ones = d.iter().filter(|&&v| v == 1.0).count();
    assert_eq!(ones, 2 * sub.edges().len());
}

fn ident() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9_]{0,6}"
}

proptest! {
    #[test]
    fn random_graphs_round_trip(
        facts in prop::collection::vec((ident(), ident(), ident(), any::<bool>()), 1..30)
    ) {
        let first = facts[0].0.clone();
        let mut g = KnowledgeGraph::new(vec![first]).unwrap();
        for (h, r, t, tail_is_class) in &facts {
            let tail = if *tail_is_class { Term::class(t.clone()) } else { Term::individual(t.clone()) };
            g.add(Term::class(h.clone()), r, tail).unwrap();
        }
        let back = KnowledgeGraph::parse(&g.to_kgt()).unwrap();
        prop_assert_eq!(back, g);
    }
}
