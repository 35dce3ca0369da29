use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no fenced JSON block in response")]
    NoBlock,
    #[error("no fenced block parsed as JSON: {0}")]
    Malformed(String),
    #[error("unexpected JSON shape: {0}")]
    Shape(String),
}

/// Returns the first fenced code block (```` ``` ```` or ```` ```json ````)
/// that parses as JSON.
pub fn extract_json_block(text: &str) -> Result<Value, ParseError> {
    let mut rest = text;
    let mut last_err = None;
    let mut saw_block = false;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let Some(close) = after.find("```") else { break };
        saw_block = true;
        let content = &after[..close];
        // Drop an info string such as `json` on the opening line.
        let first_line_end = content.find('\n').unwrap_or(content.len());
        let first = content[..first_line_end].trim_start();
        let block = if first.starts_with('{') || first.starts_with('[') {
            content
        } else {
            &content[first_line_end..]
        };
        match serde_json::from_str::<Value>(block.trim()) {
            Ok(v) => return Ok(v),
            Err(e) => last_err = Some(e.to_string()),
        }
        rest = &after[close + 3..];
    }
    match (saw_block, last_err) {
        (false, _) => Err(ParseError::NoBlock),
        (true, Some(e)) => Err(ParseError::Malformed(e)),
        (true, None) => Err(ParseError::NoBlock),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn first_well_formed_block_wins() {
        let text = "thinking...\n```json\n{not json}\n```\nthen\n```json\n{\"a\": 1}\n```\n```\n{\"a\": 2}\n```";
        assert_eq!(extract_json_block(text).unwrap(), json!({"a": 1}));
    }

    #[test]
    fn bare_json_is_rejected() {
        assert_eq!(extract_json_block("{\"a\": 1}"), Err(ParseError::NoBlock));
    }

    #[test]
    fn malformed_only() {
        assert!(matches!(extract_json_block("```json\n{\n```"), Err(ParseError::Malformed(_))));
    }

    #[test]
    fn single_line_block() {
        assert_eq!(extract_json_block("```{\"a\": [1]}```").unwrap(), json!({"a": [1]}));
    }
}
