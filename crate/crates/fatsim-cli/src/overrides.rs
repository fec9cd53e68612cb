//! Dotted-key config overrides: `a.b.c=value`, value parsed as JSON when
//! possible, else taken as a string.

pub fn apply(root: &mut serde_json::Value, entry: &str) -> Result<(), String> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| format!("override '{entry}' must look like key=value"))?;
    if path.is_empty() {
        return Err(format!("override '{entry}' has an empty key"));
    }
    let value: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(format!(
                "override '{path}': '{}' is not an object",
                parts[..i].join(".")
            ));
        }
        let map = node.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}
