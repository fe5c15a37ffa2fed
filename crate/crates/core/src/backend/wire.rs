//! JSON chat-completion wire format.
//!
//! Requests follow the widely served `{model, temperature, messages}` schema
//! with content arrays of `text` and `image_url` parts; images travel as
//! base64 data URLs.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde_json::{json, Map, Value};

use super::{BackendConfig, ChatMessage, Part, Role};
use crate::error::{Error, Result};
use crate::frames::ImagePayload;

pub fn request_body(config: &BackendConfig, messages: &[ChatMessage]) -> Value {
    let msgs: Vec<Value> = messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text(t) => json!({"type": "text", "text": t}),
                    Part::Image(img) => {
                        let mut url = Map::new();
                        url.insert("url".into(), Value::String(data_url(img)));
                        if let Some(d) = &config.image_detail {
                            url.insert("detail".into(), Value::String(d.clone()));
                        }
                        json!({"type": "image_url", "image_url": url})
                    }
                })
                .collect();
            json!({"role": m.role, "content": content})
        })
        .collect();
    let mut body = json!({
        "model": config.model,
        "temperature": config.temperature,
        "messages": msgs,
    });
    if let Some(n) = config.max_tokens {
        body["max_tokens"] = json!(n);
    }
    body
}

pub fn data_url(img: &ImagePayload) -> String {
    format!(
        "data:{};base64,{}",
        img.media_type,
        STANDARD.encode(&img.bytes)
    )
}

fn parse_data_url(url: &str) -> Result<ImagePayload> {
    let rest = url
        .strip_prefix("data:")
        .ok_or_else(|| Error::Protocol(format!("image url is not a data url: {url:.40}")))?;
    let (media_type, b64) = rest
        .split_once(";base64,")
        .ok_or_else(|| Error::Protocol("data url is not base64".into()))?;
    let bytes = STANDARD
        .decode(b64)
        .map_err(|e| Error::Protocol(format!("bad base64 image: {e}")))?;
    Ok(ImagePayload::new(media_type, bytes))
}

/// Inverse of [`request_body`] for the message list.
pub fn parse_request(body: &Value) -> Result<Vec<ChatMessage>> {
    let msgs = body["messages"]
        .as_array()
        .ok_or_else(|| Error::Protocol("request has no messages array".into()))?;
    msgs.iter()
        .map(|m| {
            let role: Role = serde_json::from_value(m["role"].clone())
                .map_err(|e| Error::Protocol(format!("bad role: {e}")))?;
            let parts = match &m["content"] {
                Value::String(s) => vec![Part::Text(s.clone())],
                Value::Array(items) => items
                    .iter()
                    .map(|item| match item["type"].as_str() {
                        Some("text") => item["text"]
                            .as_str()
                            .map(|t| Part::Text(t.to_string()))
                            .ok_or_else(|| Error::Protocol("text part without text".into())),
                        Some("image_url") => item["image_url"]["url"]
                            .as_str()
                            .ok_or_else(|| Error::Protocol("image part without url".into()))
                            .and_then(parse_data_url)
                            .map(Part::Image),
                        other => Err(Error::Protocol(format!(
                            "unknown content part type {other:?}"
                        ))),
                    })
                    .collect::<Result<Vec<_>>>()?,
                _ => return Err(Error::Protocol("message content missing".into())),
            };
            Ok(ChatMessage { role, parts })
        })
        .collect()
}

/// Assistant text of the first choice.
pub fn parse_response(body: &Value) -> Result<String> {
    let content = &body["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => {
            let text: String = parts.iter().filter_map(|p| p["text"].as_str()).collect();
            if text.is_empty() {
                Err(Error::Protocol("response content has no text parts".into()))
            } else {
                Ok(text)
            }
        }
        _ => Err(Error::Protocol(format!(
            "response lacks choices[0].message.content: {:.200}",
            body.to_string()
        ))),
    }
}
