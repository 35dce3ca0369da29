//! JSON Schemas (draft 2020-12) for every document the HTTP API emits or
//! accepts. Served under `/schemas/{name}`.

use serde_json::{json, Value};

pub const NAMES: &[&str] = &["patient_case", "case_created", "diagnosis_result", "stream_event", "session", "error"];

fn string_enum(values: &[&str]) -> Value {
    json!({ "type": "string", "enum": values })
}

fn defs() -> Value {
    json!({
        "label": { "type": "string", "minLength": 1 },
        "digest": { "type": "string", "pattern": "^[0-9a-f]{64}$" },
        "stage": string_enum(&["ingest", "predict", "examine", "review", "merge", "self_verify", "output", "ref_verify"]),
        "candidate": {
            "type": "object",
            "required": ["diagnosis", "explanations", "origin", "status"],
            "properties": {
                "diagnosis": { "$ref": "#/$defs/label" },
                "explanations": { "type": "array", "items": { "type": "string" } },
                "origin": string_enum(&["predictor", "examiner", "reviewer"]),
                "status": string_enum(&["active", "delete_proposed", "deleted"]),
                "rank": { "type": "integer", "minimum": 1 }
            },
            "additionalProperties": false
        },
        "reference_entry": {
            "type": "object",
            "required": ["source_title", "extracted_context", "chunk_id", "rerank_score"],
            "properties": {
                "source_title": { "type": "string" },
                "extracted_context": { "type": "string", "minLength": 1 },
                "chunk_id": { "type": "integer", "minimum": 0 },
                "rerank_score": { "type": "number" }
            },
            "additionalProperties": false
        },
        "reference_list": {
            "oneOf": [
                { "type": "object", "required": ["status"], "properties": { "status": { "const": "pending" } }, "additionalProperties": false },
                { "type": "object", "required": ["status"], "properties": { "status": { "const": "not_found" } }, "additionalProperties": false },
                {
                    "type": "object",
                    "required": ["status", "entries"],
                    "properties": {
                        "status": { "const": "found" },
                        "entries": { "type": "array", "minItems": 1, "items": { "$ref": "#/$defs/reference_entry" } }
                    },
                    "additionalProperties": false
                },
                {
                    "type": "object",
                    "required": ["status", "message"],
                    "properties": { "status": { "const": "error" }, "message": { "type": "string" } },
                    "additionalProperties": false
                }
            ]
        },
        "explanation_refs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["diagnosis", "explanation", "references"],
                "properties": {
                    "diagnosis": { "$ref": "#/$defs/label" },
                    "explanation": { "type": "string" },
                    "references": { "$ref": "#/$defs/reference_list" }
                },
                "additionalProperties": false
            }
        },
        "tool_call": {
            "type": "object",
            "required": ["tool", "request_digest", "response_digest", "request", "response"],
            "properties": {
                "tool": { "type": "string" },
                "request_digest": { "$ref": "#/$defs/digest" },
                "response_digest": { "$ref": "#/$defs/digest" },
                "request": {},
                "response": {}
            },
            "additionalProperties": false
        },
        "llm_exchange": {
            "type": "object",
            "required": ["tag", "kind", "temperature", "messages", "request_digest"],
            "properties": {
                "tag": { "type": "string" },
                "kind": string_enum(&["agent", "tool"]),
                "temperature": { "type": "number", "minimum": 0 },
                "messages": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["role", "content"],
                        "properties": {
                            "role": string_enum(&["system", "user", "assistant"]),
                            "content": { "type": "string" }
                        },
                        "additionalProperties": false
                    }
                },
                "response": { "type": "string" },
                "error": { "type": "string" },
                "request_digest": { "$ref": "#/$defs/digest" }
            },
            "additionalProperties": false
        },
        "stage_record": {
            "type": "object",
            "required": ["stage", "inputs_digest", "outputs_digest", "tool_calls", "llm_calls", "warnings", "output", "started_at", "ended_at"],
            "properties": {
                "stage": { "$ref": "#/$defs/stage" },
                "inputs_digest": { "$ref": "#/$defs/digest" },
                "outputs_digest": { "$ref": "#/$defs/digest" },
                "tool_calls": { "type": "array", "items": { "$ref": "#/$defs/tool_call" } },
                "llm_calls": { "type": "array", "items": { "$ref": "#/$defs/llm_exchange" } },
                "warnings": { "type": "array", "items": { "type": "string" } },
                "output": {},
                "started_at": { "type": "integer", "minimum": 0 },
                "ended_at": { "type": "integer", "minimum": 0 }
            },
            "additionalProperties": false
        },
        "diagnosis_result": {
            "type": "object",
            "required": ["case_id", "ranked_list", "per_explanation_refs", "trace"],
            "properties": {
                "case_id": { "type": "string" },
                "ranked_list": { "type": "array", "items": { "$ref": "#/$defs/candidate" } },
                "per_explanation_refs": { "$ref": "#/$defs/explanation_refs" },
                "trace": { "type": "array", "items": { "$ref": "#/$defs/stage_record" } }
            },
            "additionalProperties": false
        }
    })
}

fn patient_case() -> Value {
    json!({
        "type": "object",
        "required": ["note_text"],
        "properties": {
            "case_id": { "type": "string" },
            "note_text": { "type": "string" },
            "lab_table": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["name", "value"],
                    "properties": {
                        "name": { "type": "string" },
                        "value": { "type": "string" },
                        "unit": { "type": "string" },
                        "flag": { "type": "string" }
                    }
                }
            },
            "ecg_waveforms": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["samples", "sampling_rate"],
                    "properties": {
                        "samples": { "type": "array", "items": { "type": "number" } },
                        "sampling_rate": { "type": "number", "exclusiveMinimum": 0 },
                        "lead": { "type": "string" }
                    }
                }
            },
            "images": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["data"],
                    "properties": {
                        "modality": string_enum(&["echo", "ecg-image", "cxr", "ct"]),
                        "data": { "type": "string", "contentEncoding": "base64" },
                        "view": { "type": "string" }
                    }
                }
            },
            "demographics": {
                "type": "object",
                "properties": {
                    "age": { "type": "number" },
                    "sex": { "type": "string" },
                    "race": { "type": "string" }
                }
            }
        }
    })
}

fn body(name: &str) -> Option<Value> {
    Some(match name {
        "patient_case" => patient_case(),
        "case_created" => json!({
            "type": "object",
            "required": ["case_id", "submitted_case_id"],
            "properties": { "case_id": { "type": "string" }, "submitted_case_id": { "type": "string" } },
            "additionalProperties": false
        }),
        "diagnosis_result" => json!({ "$ref": "#/$defs/diagnosis_result" }),
        "stream_event" => json!({
            "oneOf": [
                {
                    "type": "object",
                    "required": ["event", "record"],
                    "properties": { "event": { "const": "stage" }, "record": { "$ref": "#/$defs/stage_record" } },
                    "additionalProperties": false
                },
                {
                    "type": "object",
                    "required": ["event", "result"],
                    "properties": { "event": { "const": "result" }, "result": { "$ref": "#/$defs/diagnosis_result" } },
                    "additionalProperties": false
                },
                {
                    "type": "object",
                    "required": ["event", "stage", "message", "trace"],
                    "properties": {
                        "event": { "const": "error" },
                        "stage": { "oneOf": [{ "$ref": "#/$defs/stage" }, { "type": "null" }] },
                        "message": { "type": "string" },
                        "trace": { "type": "array", "items": { "$ref": "#/$defs/stage_record" } }
                    },
                    "additionalProperties": false
                }
            ]
        }),
        "session" => json!({
            "type": "object",
            "required": ["session_id", "case_id", "status", "turns"],
            "properties": {
                "session_id": { "type": "string" },
                "case_id": { "type": "string" },
                "status": string_enum(&["open", "closed"]),
                "turns": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["index", "instruction", "result_digest", "result"],
                        "properties": {
                            "index": { "type": "integer", "minimum": 0 },
                            "instruction": { "type": ["string", "null"] },
                            "result_digest": { "$ref": "#/$defs/digest" },
                            "result": { "$ref": "#/$defs/diagnosis_result" }
                        },
                        "additionalProperties": false
                    }
                }
            },
            "additionalProperties": false
        }),
        "error" => json!({
            "type": "object",
            "required": ["error"],
            "properties": {
                "error": { "type": "string" },
                "violations": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["field", "message"],
                        "properties": { "field": { "type": "string" }, "message": { "type": "string" } }
                    }
                }
            }
        }),
        _ => return None,
    })
}

/// The named schema with shared definitions attached.
pub fn schema(name: &str) -> Option<Value> {
    let mut s = body(name)?;
    let obj = s.as_object_mut().expect("schemas are objects");
    obj.insert("$schema".into(), json!("https://json-schema.org/draft/2020-12/schema"));
    obj.insert("$id".into(), json!(format!("urn:ddx:schema:{name}")));
    obj.insert("$defs".into(), defs());
    Some(s)
}

pub fn get(name: &str) -> Option<String> {
    schema(name).map(|s| serde_json::to_string_pretty(&s).expect("schemas serialize"))
}
