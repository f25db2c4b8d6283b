"""Hand-labelled policy emissions: (raw, expected) where expected is an error
kind or ("ok", action_type, name_or_text)."""

CROP = '{"name": "crop_image", "arguments": {"bbox": [0.1, 0.2, 0.5, 0.8], "image_index": 1}}'
SEARCH = '{"name": "web_search", "arguments": {"query": "Eiffel tower height"}}'

CASES = [
    # accepted
    ('<think>zoom in</think><tool_call>{"name":"crop_image","arguments":{"bbox":[0.1,0.2,0.5,0.8],"image_index":1}}</tool_call>',
     ("ok", "tool_call", "crop_image")),
    ("<think>done</think><answer>Paris</answer>", ("ok", "answer", "Paris")),
    (f"\n  <think>\nlook closer\n</think>\n<tool_call>\n{CROP}\n</tool_call>\n\n", ("ok", "tool_call", "crop_image")),
    (f"<think>need facts</think> <tool_call>{SEARCH}</tool_call>", ("ok", "tool_call", "web_search")),
    ('<think>who is this</think><tool_call>{"name": "image_search"}</tool_call>', ("ok", "tool_call", "image_search")),
    ('<think>second image</think><tool_call>{"name": "image_search", "arguments": {"image_index": 2}}</tool_call>',
     ("ok", "tool_call", "image_search")),
    ("<think>I could write <tool_call> here but will not</think><answer>42</answer>", ("ok", "answer", "42")),
    ("<think>an <answer> fragment</think><answer>  The Louvre  </answer>", ("ok", "answer", "The Louvre")),
    # MissingThink
    (f"<tool_call>{CROP}</tool_call>", "MissingThink"),
    ("<answer>Paris</answer>", "MissingThink"),
    ("<think>   </think><answer>Paris</answer>", "MissingThink"),
    ("Paris", "MissingThink"),
    # MissingAction
    ("<think>still thinking</think>", "MissingAction"),
    ("<think>hmm</think><answer>  </answer>", "MissingAction"),
    ("<think>hmm</think><answer>Paris", "MissingAction"),
    # MultipleActions
    (f"<think>two calls</think><tool_call>{CROP}</tool_call><tool_call>{SEARCH}</tool_call>", "MultipleActions"),
    (f"<think>call and answer</think><tool_call>{SEARCH}</tool_call><answer>Paris</answer>", "MultipleActions"),
    ("<think>maybe <answer>Rome</answer> no</think><answer>Paris</answer>", "MultipleActions"),
    # StrayText
    ("Sure! <think>ok</think><answer>Paris</answer>", "StrayText"),
    ("<think>ok</think> so the answer is <answer>Paris</answer>", "StrayText"),
    ("<think>ok</think><answer>Paris</answer> Hope this helps.", "StrayText"),
    ("<think>a</think><think>b</think><answer>Paris</answer>", "StrayText"),
    ("<answer>Paris</answer><think>ok</think>", "StrayText"),
    # BadJson
    ('<think>x</think><tool_call>{"name": "web_search", "arguments": {"query": "a",}}</tool_call>', "BadJson"),
    ("<think>x</think><tool_call>{'name': 'web_search', 'arguments': {'query': 'a'}}</tool_call>", "BadJson"),
    ("<think>x</think><tool_call>   </tool_call>", "BadJson"),
    # UnknownTool
    ('<think>x</think><tool_call>{"name": "python", "arguments": {"code": "1+1"}}</tool_call>', "UnknownTool"),
    ('<think>x</think><tool_call>{"name": "Web_Search", "arguments": {"query": "a"}}</tool_call>', "UnknownTool"),
    # SchemaViolation
    ('<think>x</think><tool_call>{"name": "web_search", "arguments": {}}</tool_call>', "SchemaViolation"),
    ('<think>x</think><tool_call>{"name": "crop_image", "arguments": {"bbox": [0.1, 0.2, 0.5], "image_index": 1}}</tool_call>',
     "SchemaViolation"),
    ('<think>x</think><tool_call>{"name": "crop_image", "arguments": {"bbox": [0.1, 0.2, 1.5, 0.8], "image_index": 1}}</tool_call>',
     "SchemaViolation"),
    ('<think>x</think><tool_call>{"name": "crop_image", "arguments": {"bbox": [0.1, 0.2, 0.5, 0.8], "image_index": 0}}</tool_call>',
     "SchemaViolation"),
    ('<think>x</think><tool_call>["web_search", {"query": "a"}]</tool_call>', "SchemaViolation"),
    ('<think>x</think><tool_call>{"name": "web_search", "arguments": {"query": "a"}, "id": 3}</tool_call>',
     "SchemaViolation"),
    ('<think>x</think><tool_call>{"name": "image_search", "arguments": {"query": "red car"}}</tool_call>',
     "SchemaViolation"),
    ('<think>x</think><tool_call>{"name": "web_search", "arguments": {"query": 7}}</tool_call>', "SchemaViolation"),
]
