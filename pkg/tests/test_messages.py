from sharpersim.core import ClientRequest, MultiSeq, Transfer, sign_sim
from sharpersim.messages import (
    Accept,
    AcceptQuery,
    Checkpoint,
    Commit,
    Committed,
    NewView,
    Prepare,
    Promise,
    Propose,
    Reply,
    Request,
    SuperAccept,
    SuperPropose,
    Unknown,
    ViewChange,
    decode_message,
    encode_message,
)

REQ = ClientRequest(client=2, timestamp=9, legs=(Transfer(4, 8, 3),))
D = REQ.digest()


def roundtrip(msg):
    assert decode_message(encode_message(msg)) == msg


def test_request_roundtrip():
    roundtrip(Request(sender=-3, request=REQ))


def test_propose_roundtrip():
    roundtrip(Propose(sender=1, initiator_cluster=0, seq=5, view=2, digest=D, request=REQ))


def test_accept_roundtrip():
    roundtrip(Accept(sender=4, initiator_cluster=0, cluster=1, seq_initiator=5,
                     seq_local=9, view_initiator=2, view_local=0, digest=D))
    roundtrip(Accept(sender=4, cluster=1, seq_local=9, digest=D, request=REQ))


def test_super_roundtrips():
    roundtrip(SuperPropose(sender=0, initiator_cluster=0, seq=5, digest=D, request=REQ))
    roundtrip(SuperAccept(sender=3, initiator_cluster=0, cluster=1, seq_initiator=5,
                          seq_local=7, digest=D, request=REQ))


def test_commit_roundtrip():
    label = MultiSeq(((0, 5), (1, 9)))
    roundtrip(Commit(sender=0, auth=sign_sim(0, D), label=label,
                     views=(1, 0), digest=D, request=REQ))


def test_control_messages_roundtrip():
    roundtrip(Reply(sender=2, result="applied", digest=D))
    roundtrip(AcceptQuery(sender=3, cluster=1, seq_initiator=5, seq_local=7, digest=D))
    roundtrip(AcceptQuery(sender=3, cluster=1, seq_initiator=5))
    roundtrip(Unknown(sender=1, seq=5))
    roundtrip(Prepare(sender=1, number=(3, 1)))
    roundtrip(Promise(sender=2, number=(3, 1), high_seq=14))
    roundtrip(Checkpoint(sender=2, cluster=0, seq=100, state_digest=D))


def test_nested_roundtrip():
    label = MultiSeq(((0, 5),))
    commit = Commit(sender=0, auth=sign_sim(0, D), label=label, digest=D, request=REQ)
    roundtrip(Committed(sender=1, seq=5, digest=D, commit=commit))
    vc = ViewChange(sender=2, cluster=0, new_view=1, checkpoint_seq=0,
                    accepts=(Accept(sender=2, cluster=0, seq_local=5, digest=D),),
                    commits=(commit,))
    roundtrip(vc)
    roundtrip(NewView(sender=3, cluster=0, new_view=1, proof=(vc,),
                      proposes=(Propose(sender=3, seq=5, digest=D, request=REQ),),
                      commit_sets=((commit,),)))
