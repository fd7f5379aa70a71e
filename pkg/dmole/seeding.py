"""
随机种子派生 - 所有随机性都从一个根种子按名字派生
"""
import hashlib


def derive_seed(root_seed: int, name: str, *indices) -> int:
    """
    由根种子、流名称和可选下标派生一个稳定的 63 位子种子

    Examples:
        derive_seed(0, 'subset', 3)  # 第3个任务的子集采样种子
    """
    key = ':'.join([str(int(root_seed)), name] + [str(i) for i in indices])
    digest = hashlib.sha256(key.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') & ((1 << 63) - 1)
