pub mod kv_oracle;
