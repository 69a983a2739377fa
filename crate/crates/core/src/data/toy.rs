//! Tiny built-in datasets used by tests, demos, and the README walkthrough.

use super::{
    CategoricalFeature, CategoricalSchema, Dataset, Features, LabelSchema, Row, Schema,
};

/// The classic 14-row play-tennis dataset (Quinlan). Four categorical
/// features, binary label; the canonical smoke test for ID3.
pub fn play_tennis() -> Dataset {
    let schema = play_tennis_schema();
    const ROWS: [(&str, &str, &str, &str, &str); 14] = [
        ("Sunny", "Hot", "High", "Weak", "No"),
        ("Sunny", "Hot", "High", "Strong", "No"),
        ("Overcast", "Hot", "High", "Weak", "Yes"),
        ("Rain", "Mild", "High", "Weak", "Yes"),
        ("Rain", "Cool", "Normal", "Weak", "Yes"),
        ("Rain", "Cool", "Normal", "Strong", "No"),
        ("Overcast", "Cool", "Normal", "Strong", "Yes"),
        ("Sunny", "Mild", "High", "Weak", "No"),
        ("Sunny", "Cool", "Normal", "Weak", "Yes"),
        ("Rain", "Mild", "Normal", "Weak", "Yes"),
        ("Sunny", "Mild", "Normal", "Strong", "Yes"),
        ("Overcast", "Mild", "High", "Strong", "Yes"),
        ("Overcast", "Hot", "Normal", "Weak", "Yes"),
        ("Rain", "Mild", "High", "Strong", "No"),
    ];

    let cat = match &schema {
        Schema::Categorical(s) => s.clone(),
        _ => unreachable!(),
    };
    let id_of = |f: usize, v: &str| cat.features[f].values.iter().position(|x| x == v).unwrap();
    let rows = ROWS
        .iter()
        .map(|&(outlook, temp, humidity, wind, play)| Row {
            features: Features::Categorical(vec![
                id_of(0, outlook),
                id_of(1, temp),
                id_of(2, humidity),
                id_of(3, wind),
            ]),
            label: cat.label.classes.iter().position(|c| c == play).unwrap(),
        })
        .collect();

    Dataset { schema, rows }
}

/// Schema for [`play_tennis`], usable on its own for CSV loading.
pub fn play_tennis_schema() -> Schema {
    Schema::Categorical(CategoricalSchema {
        features: vec![
            CategoricalFeature {
                name: "outlook".into(),
                values: vec!["Sunny".into(), "Overcast".into(), "Rain".into()],
            },
            CategoricalFeature {
                name: "temperature".into(),
                values: vec!["Hot".into(), "Mild".into(), "Cool".into()],
            },
            CategoricalFeature {
                name: "humidity".into(),
                values: vec!["High".into(), "Normal".into()],
            },
            CategoricalFeature {
                name: "wind".into(),
                values: vec!["Weak".into(), "Strong".into()],
            },
        ],
        label: LabelSchema { name: "play".into(), classes: vec!["No".into(), "Yes".into()] },
    })
}
