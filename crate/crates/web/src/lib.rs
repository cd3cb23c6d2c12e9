//! Browser bindings for three offline operations: evaluating an expression
//! tree, drawing a bank question with its hints, and building answer options.
//! Every function returns a JSON string.

use mlq_core::bank::{instantiate, sample_values, stream_rng, TemplateBank, Topic};
use mlq_core::expr::{format_value, parse_tree, render_infix, InfixStyle, Leaf};
use mlq_core::hints::{hint_sequence, HintStep};
use mlq_core::mcq::distractors;
use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Evaluated {
    value: f64,
    value_text: String,
    expression: String,
    nodes: usize,
}

#[derive(Serialize)]
struct Drawn {
    id: String,
    topic: String,
    text: String,
    tree: String,
    expression: String,
    answer: f64,
    answer_text: String,
    quantities: Vec<f64>,
    hints: Vec<HintStep>,
}

#[derive(Serialize)]
struct Choices {
    options: Vec<f64>,
    labels: Vec<String>,
    answer_index: usize,
}

fn parse_bindings(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| format!("`{s}` is not a number"))
        })
        .collect()
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// Value and infix form of a prefix tree such as `(add q0 (mul q1 c:2))`
/// under comma-separated quantity values.
pub fn evaluate_json(tree: &str, bindings: &str) -> Result<String, String> {
    let tree = parse_tree(tree).map_err(|e| e.to_string())?;
    let values = parse_bindings(bindings)?;
    tree.check_quantities(values.len())
        .map_err(|e| e.to_string())?;
    let value = tree.evaluate(&values).map_err(|e| e.to_string())?;
    let expression = render_infix(tree.root(), InfixStyle::Spaced, &|l: &Leaf| match l {
        Leaf::Quantity(i) => format_value(values[*i]),
        Leaf::Constant(c) => format_value(*c),
    });
    Ok(to_json(&Evaluated {
        value,
        value_text: format_value(value),
        expression,
        nodes: tree.node_count(),
    }))
}

/// A question from the built-in bank with its full hint sequence. `topic`
/// may be empty for any topic.
pub fn draw_question_json(topic: &str, seed: u32) -> Result<String, String> {
    let bank = TemplateBank::default_bank();
    let topic: Option<Topic> = if topic.trim().is_empty() {
        None
    } else {
        Some(
            topic
                .parse()
                .map_err(|e: mlq_core::bank::UnknownTopic| e.to_string())?,
        )
    };
    let templates: Vec<_> = bank
        .templates
        .iter()
        .filter(|t| topic.is_none_or(|x| t.topic == x))
        .collect();
    let mut rng = stream_rng(seed as u64, "web", 0);
    let template = templates[rng.random_range(0..templates.len())];
    let paraphrase = rng.random_range(0..template.paraphrases.len());
    let values = sample_values(template, &mut rng).map_err(|e| e.to_string())?;
    let inst = instantiate(
        template,
        paraphrase,
        &values,
        format!("{}-p{paraphrase}-w{seed}", template.id),
    )
    .map_err(|e| e.to_string())?;
    let hints = hint_sequence(&inst, &bank, &mut rng).unwrap_or_default();
    let names: Vec<String> = (0..inst.quantities.len())
        .map(|i| inst.quantity_name(i))
        .collect();
    let expression = render_infix(
        inst.gold_tree.root(),
        InfixStyle::Spaced,
        &|l: &Leaf| match l {
            Leaf::Quantity(i) => names[*i].clone(),
            Leaf::Constant(c) => format_value(*c),
        },
    );
    Ok(to_json(&Drawn {
        id: inst.id.clone(),
        topic: inst.topic.name().to_string(),
        text: inst.text.clone(),
        tree: inst.gold_tree.serialize(),
        expression,
        answer: inst.gold_value,
        answer_text: format_value(inst.gold_value),
        quantities: inst.quantities.clone(),
        hints,
    }))
}

/// `n` shuffled answer options for a tree, one of them correct.
pub fn distractors_json(tree: &str, bindings: &str, n: usize, seed: u32) -> Result<String, String> {
    let tree = parse_tree(tree).map_err(|e| e.to_string())?;
    let values = parse_bindings(bindings)?;
    tree.check_quantities(values.len())
        .map_err(|e| e.to_string())?;
    let o = distractors(
        &tree,
        &values,
        n,
        &mut stream_rng(seed as u64, "web-options", 0),
    )
    .map_err(|e| e.to_string())?;
    Ok(to_json(&Choices {
        labels: o.options.iter().map(|v| format_value(*v)).collect(),
        options: o.options,
        answer_index: o.answer_index,
    }))
}

#[wasm_bindgen]
pub fn evaluate(tree: &str, bindings: &str) -> Result<String, JsError> {
    evaluate_json(tree, bindings).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = drawQuestion)]
pub fn draw_question(topic: &str, seed: u32) -> Result<String, JsError> {
    draw_question_json(topic, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = answerOptions)]
pub fn answer_options(tree: &str, bindings: &str, n: usize, seed: u32) -> Result<String, JsError> {
    distractors_json(tree, bindings, n, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn topics() -> String {
    to_json(&Topic::ALL.iter().map(|t| t.name()).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn json(s: String) -> Value {
        serde_json::from_str(&s).unwrap()
    }

    #[test]
    fn evaluates_magnitude() {
        let v =
            json(evaluate_json("(pow (add (pow q0 c:2) (pow q1 c:2)) c:0.5)", "10, 10").unwrap());
        assert_eq!(v["value_text"], "14.14");
        assert_eq!(v["nodes"], 9);
        assert!(evaluate_json("(add q0 q1)", "1").is_err());
        assert!(evaluate_json("(add q0", "1").is_err());
        assert!(evaluate_json("(log q0)", "-1").is_err());
    }

    #[test]
    fn drawn_question_carries_hints() {
        let v = json(draw_question_json("Reinforcement learning", 3).unwrap());
        assert_eq!(v["topic"], "Reinforcement learning");
        let hints = v["hints"].as_array().unwrap();
        assert!(!hints.is_empty());
        assert_eq!(hints.last().unwrap()["value"], v["answer"]);
        assert_eq!(
            draw_question_json("", 5).unwrap(),
            draw_question_json("", 5).unwrap()
        );
        assert!(draw_question_json("Quantum", 0).is_err());
    }

    #[test]
    fn options_contain_the_answer_once() {
        let v = json(distractors_json("(add q0 (mul q1 q2))", "1,2,3", 4, 0).unwrap());
        let options = v["options"].as_array().unwrap();
        assert_eq!(options.len(), 4);
        assert_eq!(options[v["answer_index"].as_u64().unwrap() as usize], 7.0);
        assert_eq!(
            options.iter().filter(|o| o.as_f64() == Some(7.0)).count(),
            1
        );
        assert!(distractors_json("(add q0 q1)", "1,2", 1, 0).is_err());
    }

    #[test]
    fn topics_lists_twelve() {
        assert_eq!(json(topics()).as_array().unwrap().len(), 12);
    }
}
