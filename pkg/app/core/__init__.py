# モデル・積分器・解析・設定・CLI
