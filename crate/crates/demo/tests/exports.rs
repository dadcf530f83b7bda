use serde_json::Value;
use tamer_demo::{evaluate_lines, relation_heatmap, treeify};

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn tree_export() {
    let t = parse(&treeify("3 ^ { 2 } - 1 = 8", false));
    assert_eq!(t["tuples"], "(0, -1), (1, -1), (2, -1), (3, 0), (4, -1), (5, 0), (6, 5), (7, 6), (8, 7)");
    assert_eq!(t["complexity"], 1);
    assert_eq!(parse(&treeify("x^{2}", true))["parents"], serde_json::json!([-1, -1, -1, 0, -1]));
    assert!(parse(&treeify("a ^ { b", false))["error"].is_string());
}

#[test]
fn heatmap_rows_are_distributions() {
    let h = parse(&relation_heatmap("x ^ { 2 } + 1", false, 3));
    let probs = h["probs"].as_array().unwrap();
    assert_eq!(probs.len(), 7);
    for (i, row) in probs.iter().enumerate().skip(1) {
        let row: Vec<f64> = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!((row[..i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[i..].iter().all(|&p| p == 0.0));
    }
    assert_eq!(relation_heatmap("x ^ { 2 } + 1", false, 3), relation_heatmap("x ^ { 2 } + 1", false, 3));
    assert!(parse(&relation_heatmap("a + ?", false, 3))["error"].is_string());
}

#[test]
fn eval_export() {
    let e = parse(&evaluate_lines("a + b\nx\n", "a + b\ny\n"));
    assert_eq!(e["exprate"], 50.0);
    assert!(e["csv"].as_str().unwrap().ends_with("TOTAL,2,50.0000,100.0000,100.0000,100.0000\n"));
    assert!(parse(&evaluate_lines("a", "a\nb"))["error"].is_string());
}
