# シェルモデル有限時間爆発の数値検証ツール
